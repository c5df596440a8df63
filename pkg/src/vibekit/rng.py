"""Seeded, portable random number generation.

The generator is pcg32: a 64-bit linear congruential state with an
XSH-RR output permutation and a per-stream odd increment. The whole
algorithm is integer arithmetic mod 2^64, so the raw stream is
bit-identical on every platform and in any language that reimplements
the three constants below. Reference vectors (asserted in the test
suite and reproduced in the README): seeding with (seed=42, stream=54)
yields the 32-bit outputs

    0xa15c02b7 0x7b47f409 0xba1d3330 0x83d2f293 0xbfa4784b 0xcbed606e

Gaussian variates come from Box-Muller applied to consecutive uniform
pairs: each pair of normals consumes exactly two uniforms, and odd-length
requests discard the spare second variate rather than caching it.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ContractError
from .tensor import Tensor

_MASK64 = (1 << 64) - 1
_MULT = 6364136223846793005
_TWO32 = float(1 << 32)


class Rng:
    """pcg32 stream with a draw counter.

    Single-owner: not safe for concurrent mutation. Use ``spawn`` to get
    statistically independent substreams for parallel or per-item work.
    """

    def __init__(self, seed: int, stream: int = 0):
        if not 0 <= int(seed) <= _MASK64:
            raise ContractError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.seed = int(seed)
        self.stream = int(stream) & _MASK64
        self._inc = ((self.stream << 1) | 1) & _MASK64
        state = (0 * _MULT + self._inc) & _MASK64
        state = (state + self.seed) & _MASK64
        self._state = (state * _MULT + self._inc) & _MASK64
        self._draws = 0

    @property
    def counter(self) -> int:
        """Number of raw 32-bit outputs consumed so far."""
        return self._draws

    def spawn(self, stream: int) -> "Rng":
        """Fresh generator with the same seed on a different pcg32 stream."""
        return Rng(self.seed, stream)

    def next_u32(self) -> int:
        old = self._state
        self._state = (old * _MULT + self._inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        self._draws += 1
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def raw_u32(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint32)
        nxt = self.next_u32
        for i in range(n):
            out[i] = nxt()
        return out

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in (0, 1]; (u32 + 1) / 2^32, never exactly zero."""
        return (self.raw_u32(n).astype(np.float64) + 1.0) / _TWO32

    def gaussian_array(self, shape: tuple[int, ...] | list[int]) -> np.ndarray:
        shape = tuple(int(s) for s in shape)
        n = int(np.prod(shape)) if shape else 1
        if n == 0:
            return np.zeros(shape, dtype=np.float64)
        pairs = (n + 1) // 2
        u = self.uniform(2 * pairs)
        u1, u2 = u[0::2], u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n].reshape(shape)

    def gaussian(self, shape: tuple[int, ...] | list[int]) -> Tensor:
        """Standard normal Tensor of the given shape."""
        return Tensor._wrap(self.gaussian_array(shape))

    def uniform_range(self, lo: float, hi: float) -> float:
        """One double in (lo, hi]."""
        return lo + (hi - lo) * float(self.uniform(1)[0])

    def randint(self, n: int) -> int:
        """One integer in [0, n) by rejection-free modulo (fine at toy scale)."""
        if n <= 0:
            raise ContractError("randint needs n >= 1")
        return self.next_u32() % n
