"""Reverse-mode differentiation over a per-forward-pass tape.

A Tape is a Wengert list: ops append (output, inputs, vjp) records in
execution order, ``backward`` replays them in exact reverse order and
accumulates gradients per tensor identity. Tapes are built for one
forward pass and discarded after backward; there is no graph reuse.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Tape:
    """Single-owner op recorder. Not safe for concurrent mutation."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._grads: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))

    def backward(self, loss: Tensor) -> None:
        """Seed d(loss)/d(loss) = 1 and sweep the records in reverse.

        Tensors that never contributed to ``loss`` keep zero gradient.
        """
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._grads = {id(loss): np.ones(())}
        for out, inputs, vjp in reversed(self._records):
            g = self._grads.get(id(out))
            if g is None:
                continue
            for tensor, grad in zip(inputs, vjp(g)):
                if grad is None:
                    continue
                acc = self._grads.get(id(tensor))
                self._grads[id(tensor)] = grad if acc is None else acc + grad

    def grad(self, t: Tensor) -> Tensor:
        """Accumulated gradient for ``t`` (zeros if it was unused)."""
        g = self._grads.get(id(t))
        if g is None:
            return Tensor._wrap(np.zeros(t.shape))
        return Tensor._wrap(np.array(g, copy=True))


def grad_check(f: Callable, x: Tensor, h: float = 1e-4) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f(x, tape)`` must return a scalar Tensor and be evaluable at x +- h
    along every coordinate. Relative error per coordinate is
    |analytic - numeric| / max(1, |analytic|).
    """
    if not (1e-6 <= h <= 1e-3):
        raise ContractError(f"step size h must lie in [1e-6, 1e-3], got {h}")
    tape = Tape()
    y = f(x, tape)
    if not isinstance(y, Tensor) or y.shape != ():
        raise ContractError("grad_check requires a scalar-valued function")
    tape.backward(y)
    analytic = tape.grad(x).numpy().ravel()

    flat = x.numpy().ravel()
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        bumped = flat.copy()
        bumped[i] = flat[i] + h
        fp = f(Tensor._wrap(bumped.reshape(x.shape)), None).item()
        bumped[i] = flat[i] - h
        fm = f(Tensor._wrap(bumped.reshape(x.shape)), None).item()
        numeric[i] = (fp - fm) / (2.0 * h)

    rel = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(rel.max()) if rel.size else 0.0
