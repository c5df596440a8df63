"""Named-tensor checkpoints and the VBCP on-disk format.

VBCP is a single-file, seekable container:

    bytes 0..3   magic "VBCP"
    bytes 4..7   format version, u32 little-endian (currently 1)
    bytes 8..15  header length in bytes, u64 little-endian
    then         UTF-8 JSON header
    then         zero padding up to the first 8-byte-aligned position
    then         raw tensor data, little-endian float32

The JSON header is {"metadata": {...}, "tensors": [{"name", "dtype",
"shape", "offset", "nbytes"}, ...]}. Offsets are relative to the start
of the (aligned) data section and are themselves 8-byte aligned. Only
dtype "f32" exists; in-memory compute stays float64 and values are
rounded to nearest-even on write. Readback of a written file reproduces
the written bytes exactly, so digests are stable.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .tensor import Tensor

MAGIC = b"VBCP"
VERSION = 1
_ALIGN = 8


def _align(n: int) -> int:
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


@dataclass
class Checkpoint:
    """Ordered name -> Tensor map with string metadata.

    Treated as immutable after construction: transforms return new
    checkpoints and never mutate the inputs.
    """

    tensors: dict[str, Tensor] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        for name in self.tensors:
            if not isinstance(name, str) or not name:
                raise CheckpointError(f"tensor names must be non-empty strings, got {name!r}")
        for k, v in self.metadata.items():
            if not isinstance(k, str) or not isinstance(v, str):
                raise CheckpointError("metadata must map strings to strings")

    def names(self) -> list[str]:
        return list(self.tensors)

    def get(self, name: str) -> Tensor:
        try:
            return self.tensors[name]
        except KeyError:
            raise CheckpointError(f"checkpoint has no tensor named {name!r}") from None

    def with_tensors(self, updates: dict[str, Tensor], metadata: dict[str, str] | None = None) -> "Checkpoint":
        """Copy with some tensors replaced; order of existing names is kept."""
        new = dict(self.tensors)
        for name, t in updates.items():
            new[name] = t
        return Checkpoint(new, dict(self.metadata if metadata is None else metadata))


def header_json(ckpt: Checkpoint) -> str:
    """The exact header text that save() writes for this checkpoint."""
    offset = 0
    entries = []
    for name, t in ckpt.tensors.items():
        nbytes = 4 * t.size
        entries.append({
            "name": name,
            "dtype": "f32",
            "shape": list(t.shape),
            "offset": offset,
            "nbytes": nbytes,
        })
        offset = _align(offset + nbytes)
    header = {"metadata": dict(ckpt.metadata), "tensors": entries}
    return json.dumps(header, separators=(",", ":"), ensure_ascii=False)


def save(ckpt: Checkpoint, path: str | os.PathLike) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    header = header_json(ckpt).encode("utf-8")
    prefix_len = 4 + 4 + 8 + len(header)
    data_start = _align(prefix_len)
    blobs = []
    offset = 0
    for t in ckpt.tensors.values():
        raw = np.ascontiguousarray(t.numpy(), dtype="<f4").tobytes()
        blobs.append((offset, raw))
        offset = _align(offset + len(raw))
    total = offset

    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".vbcp.tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(VERSION.to_bytes(4, "little"))
            f.write(len(header).to_bytes(8, "little"))
            f.write(header)
            f.write(b"\x00" * (data_start - prefix_len))
            body = bytearray(total)
            for off, raw in blobs:
                body[off:off + len(raw)] = raw
            f.write(bytes(body))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path: str | os.PathLike) -> str:
    """Raw JSON header text, exactly as stored."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a VBCP file")
        version = int.from_bytes(f.read(4), "little")
        if version != VERSION:
            raise CheckpointError(f"unsupported VBCP version {version}")
        header_len = int.from_bytes(f.read(8), "little")
        header = f.read(header_len)
        if len(header) != header_len:
            raise CheckpointError("truncated VBCP header")
    return header.decode("utf-8")


def load(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:4]!r}; not a VBCP file")
    version = int.from_bytes(blob[4:8], "little")
    if version != VERSION:
        raise CheckpointError(f"unsupported VBCP version {version}")
    header_len = int.from_bytes(blob[8:16], "little")
    try:
        header = json.loads(blob[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"malformed VBCP header: {e}") from None
    data_start = _align(16 + header_len)
    tensors: dict[str, Tensor] = {}
    for entry in header["tensors"]:
        name = entry["name"]
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        if entry["dtype"] != "f32":
            raise CheckpointError(f"unsupported dtype {entry['dtype']!r} for {name!r}")
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = data_start + int(entry["offset"])
        nbytes = int(entry["nbytes"])
        if nbytes != 4 * count:
            raise CheckpointError(f"nbytes mismatch for {name!r}")
        raw = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[name] = Tensor(raw.astype(np.float64).reshape(shape))
    metadata = {str(k): str(v) for k, v in header["metadata"].items()}
    return Checkpoint(tensors, metadata)
