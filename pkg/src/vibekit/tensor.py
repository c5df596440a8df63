"""Immutable float64 tensor value type.

A Tensor is a thin wrapper over a read-only numpy float64 array. All
compute in this toolkit happens in 64-bit; the only 32-bit path is the
checkpoint codec. Tensors are value objects: operations return new
instances and the underlying buffer is marked non-writeable, so sharing
across threads is safe.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    __slots__ = ("_a",)

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise ContractError("Tensor construction requires finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        self._a = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray, *, copy: bool = False) -> "Tensor":
        """Internal constructor: trusts the caller, skips the finite check.

        Used by operations whose outputs are finite by construction and by
        the few places that legitimately carry -inf (log-masks).
        """
        t = object.__new__(cls)
        a = np.array(arr, dtype=np.float64, copy=copy or not isinstance(arr, np.ndarray))
        if a.flags.writeable:
            a.flags.writeable = False
        t._a = a
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self._a.shape

    @property
    def ndim(self) -> int:
        return self._a.ndim

    @property
    def size(self) -> int:
        return self._a.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._a

    def item(self) -> float:
        if self._a.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, shape is {self.shape}")
        return float(self._a.reshape(()))

    def tolist(self):
        return self._a.tolist()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


def zeros(shape: Sequence[int] | int) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    return Tensor._wrap(np.zeros(tuple(shape), dtype=np.float64))


def ones(shape: Sequence[int] | int) -> Tensor:
    if isinstance(shape, int):
        shape = (shape,)
    return Tensor._wrap(np.ones(tuple(shape), dtype=np.float64))


def eye(n: int) -> Tensor:
    return Tensor._wrap(np.eye(n, dtype=np.float64))


def full(shape: Sequence[int], value: float) -> Tensor:
    return Tensor._wrap(np.full(tuple(shape), float(value), dtype=np.float64))
