#!/usr/bin/env python3
"""Regenerate the committed golden checkpoint fixture.

The fixture pins the on-disk format: tests compare its sha256 and the
exact header text a fresh writer produces. Run this only when the format
version changes, and update the recorded digests in the same commit.
"""

import hashlib
import os

from vibekit import Checkpoint, Tensor, save
from vibekit.checkpoint import read_header

HERE = os.path.dirname(os.path.abspath(__file__))
GOLDEN = os.path.join(HERE, "..", "tests", "golden")


def main() -> None:
    os.makedirs(GOLDEN, exist_ok=True)
    ckpt = Checkpoint(
        {
            "layers.0.weight": Tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]),
            "layers.0.bias": Tensor([0.5, -0.25, 7.0]),
        },
        {"stage": "golden", "note": "format fixture, do not regenerate casually"},
    )
    path = os.path.join(GOLDEN, "reference.vbcp")
    save(ckpt, path)
    with open(path, "rb") as f:
        digest = hashlib.sha256(f.read()).hexdigest()
    with open(os.path.join(GOLDEN, "reference.sha256"), "w", encoding="utf-8") as f:
        f.write(digest + "\n")
    # the golden inspect output is the raw header plus the trailing newline
    # that the CLI's print adds
    with open(os.path.join(GOLDEN, "reference_header.txt"), "w", encoding="utf-8") as f:
        f.write(read_header(path) + "\n")
    print(f"wrote {path}\nsha256 {digest}")


if __name__ == "__main__":
    main()
