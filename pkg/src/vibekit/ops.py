"""Primitive tensor operations, differentiable when recorded on a Tape.

Every public function takes Tensors and an optional ``tape``. With
``tape=None`` the op is a plain numpy computation; with a Tape it also
registers a vector-Jacobian closure so ``Tape.backward`` can push
gradients to the inputs. Backward functions work on raw numpy arrays.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import ContractError, EmptyAttentionRowError, ShapeError
from .rng import Rng
from .tensor import Tensor


def _rec(tape, out, inputs, vjp):
    if tape is not None:
        tape._record(out, inputs, vjp)
    return out


# ---------------------------------------------------------------------------
# elementwise and linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    an, bn = a.numpy(), b.numpy()
    out = Tensor._wrap(an @ bn)
    return _rec(tape, out, (a, b), lambda g: (g @ bn.T, an.T @ g))


def add(a: Tensor, b: Tensor, tape=None) -> Tensor:
    """Elementwise sum; ``b`` may also match a trailing suffix of ``a``'s shape."""
    if a.shape == b.shape:
        out = Tensor._wrap(a.numpy() + b.numpy())
        return _rec(tape, out, (a, b), lambda g: (g, g))
    if b.ndim <= a.ndim and a.shape[a.ndim - b.ndim:] == b.shape:
        lead = tuple(range(a.ndim - b.ndim))
        out = Tensor._wrap(a.numpy() + b.numpy())
        return _rec(tape, out, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add shapes incompatible: {a.shape} vs {b.shape}")


def sub(a: Tensor, b: Tensor, tape=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"sub shapes differ: {a.shape} vs {b.shape}")
    out = Tensor._wrap(a.numpy() - b.numpy())
    return _rec(tape, out, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor, tape=None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shapes differ: {a.shape} vs {b.shape}")
    an, bn = a.numpy(), b.numpy()
    out = Tensor._wrap(an * bn)
    return _rec(tape, out, (a, b), lambda g: (g * bn, g * an))


def scale(a: Tensor, c: float, tape=None) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.numpy() * c)
    return _rec(tape, out, (a,), lambda g: (g * c,))


def transpose(a: Tensor, tape=None) -> Tensor:
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = Tensor._wrap(a.numpy().T.copy())
    return _rec(tape, out, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: Sequence[int], tape=None) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = a.shape
    try:
        out = Tensor._wrap(a.numpy().reshape(shape))
    except ValueError as e:
        raise ShapeError(str(e)) from None
    return _rec(tape, out, (a,), lambda g: (g.reshape(old),))


def concat(parts: Sequence[Tensor], axis: int, tape=None) -> Tensor:
    if not parts:
        raise ContractError("concat needs at least one tensor")
    arrs = [p.numpy() for p in parts]
    try:
        out = Tensor._wrap(np.concatenate(arrs, axis=axis))
    except ValueError as e:
        raise ShapeError(str(e)) from None
    sizes = [a.shape[axis] for a in arrs]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _rec(tape, out, tuple(parts), vjp)


def slice_lastdim(a: Tensor, start: int, stop: int, tape=None) -> Tensor:
    d = a.shape[-1]
    if not 0 <= start < stop <= d:
        raise ContractError(f"slice [{start}:{stop}] out of range for last dim {d}")
    out = Tensor._wrap(a.numpy()[..., start:stop].copy())

    def vjp(g):
        full = np.zeros(a.shape)
        full[..., start:stop] = g
        return (full,)

    return _rec(tape, out, (a,), vjp)


def reduce_sum(a: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(np.asarray(a.numpy().sum()))
    shp = a.shape
    return _rec(tape, out, (a,), lambda g: (np.full(shp, float(g)),))


def reduce_mean(a: Tensor, tape=None) -> Tensor:
    out = Tensor._wrap(np.asarray(a.numpy().mean()))
    shp, n = a.shape, a.size
    return _rec(tape, out, (a,), lambda g: (np.full(shp, float(g) / n),))


def silu(a: Tensor, tape=None) -> Tensor:
    """x * sigmoid(x); smooth, so finite-difference gradient checks stay tight."""
    x = a.numpy()
    sig = 1.0 / (1.0 + np.exp(-x))
    out = Tensor._wrap(x * sig)
    return _rec(tape, out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def softmax_lastdim(x: Tensor, tape=None) -> Tensor:
    """Numerically stable softmax over the last axis.

    Entries may be -inf (masked keys) and map to exactly 0. A row that is
    entirely -inf has no valid normalization and raises.
    """
    a = x.numpy()
    if a.shape == () or a.shape[-1] < 1:
        raise ShapeError("softmax needs a non-empty last dimension")
    finite_any = np.isfinite(a).any(axis=-1)
    if not finite_any.all():
        raise EmptyAttentionRowError("empty attention row: all entries masked")
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor._wrap(y)

    def vjp(g):
        dot = (g * y).sum(axis=-1, keepdims=True)
        return (y * (g - dot),)

    return _rec(tape, out, (x,), vjp)


# ---------------------------------------------------------------------------
# spatial resampling (2D grids, optional trailing channel axis)
# ---------------------------------------------------------------------------


def _spatial(a: Tensor, name: str) -> tuple[int, int]:
    if a.ndim not in (2, 3):
        raise ShapeError(f"{name} needs a (H, W) or (H, W, C) tensor, got {a.shape}")
    return a.shape[0], a.shape[1]


def avg_pool2d(a: Tensor, s: int, tape=None) -> Tensor:
    """Non-overlapping s x s mean pooling over the two leading axes."""
    s = int(s)
    if s < 1:
        raise ContractError(f"pool factor must be >= 1, got {s}")
    h, w = _spatial(a, "avg_pool2d")
    if h % s or w % s:
        raise ContractError(f"extents ({h}, {w}) not divisible by pool factor {s}")
    x = a.numpy()
    tail = x.shape[2:]
    y = x.reshape(h // s, s, w // s, s, *tail).mean(axis=(1, 3))
    out = Tensor._wrap(y)

    def vjp(g):
        gg = g / (s * s)
        return (np.repeat(np.repeat(gg, s, axis=0), s, axis=1),)

    return _rec(tape, out, (a,), vjp)


def nearest_upsample2d(a: Tensor, s: int, tape=None) -> Tensor:
    """Each cell replicated into an s x s block."""
    s = int(s)
    if s < 1:
        raise ContractError(f"upsample factor must be >= 1, got {s}")
    h, w = _spatial(a, "nearest_upsample2d")
    x = a.numpy()
    y = np.repeat(np.repeat(x, s, axis=0), s, axis=1)
    out = Tensor._wrap(y)
    tail = x.shape[2:]

    def vjp(g):
        return (g.reshape(h, s, w, s, *tail).sum(axis=(1, 3)),)

    return _rec(tape, out, (a,), vjp)


def _bilinear_matrix(n: int, s: int) -> np.ndarray:
    """(n*s, n) interpolation matrix, half-pixel centers, edges clamped."""
    out = np.zeros((n * s, n))
    for i in range(n * s):
        src = (i + 0.5) / s - 0.5
        src = min(max(src, 0.0), n - 1.0)
        lo = int(math.floor(src))
        hi = min(lo + 1, n - 1)
        frac = src - lo
        out[i, lo] += 1.0 - frac
        out[i, hi] += frac
    return out


def bilinear_upsample2d(a: Tensor, s: int, tape=None) -> Tensor:
    """Separable bilinear upsampling by integer factor s."""
    s = int(s)
    if s < 1:
        raise ContractError(f"upsample factor must be >= 1, got {s}")
    h, w = _spatial(a, "bilinear_upsample2d")
    ay = _bilinear_matrix(h, s)
    ax = _bilinear_matrix(w, s)
    x = a.numpy()
    if a.ndim == 2:
        y = ay @ x @ ax.T
        out = Tensor._wrap(y)
        return _rec(tape, out, (a,), lambda g: (ay.T @ g @ ax,))
    y = np.einsum("ih,hwc,jw->ijc", ay, x, ax)
    out = Tensor._wrap(y)
    return _rec(tape, out, (a,), lambda g: (np.einsum("ih,ijc,jw->hwc", ay, g, ax),))


# ---------------------------------------------------------------------------
# rotary position injection for 2D token grids
# ---------------------------------------------------------------------------


def _rope_tables(h: int, w: int, d: int, base: float):
    half = d // 2
    npairs = half // 2
    freqs = base ** (-2.0 * np.arange(npairs) / half)
    pos = np.arange(h * w)
    xs = pos % w
    ys = pos // w
    ang_x = xs[:, None] * freqs[None, :]
    ang_y = ys[:, None] * freqs[None, :]
    return np.cos(ang_x), np.sin(ang_x), np.cos(ang_y), np.sin(ang_y)


def rope2d(a: Tensor, h: int, w: int, base: float = 10000.0, tape=None) -> Tensor:
    """Axial rotary encoding: first d/2 channels rotate by the token's x
    coordinate, last d/2 by its y coordinate, in (even, odd) channel pairs.

    Each pair rotation is orthogonal, so token norms are preserved and the
    q-k inner product depends only on coordinate differences along each axis.
    """
    if a.ndim != 2 or a.shape[0] != h * w:
        raise ShapeError(f"rope2d expects ({h * w}, d) tokens, got {a.shape}")
    d = a.shape[1]
    if d % 4:
        raise ContractError(f"rope2d needs d divisible by 4, got {d}")
    cx, sx, cy, sy = _rope_tables(h, w, d, base)
    half = d // 2

    def rotate(x, flip_sign):
        out = np.empty_like(x)
        for off, (c, s) in ((0, (cx, sx)), (half, (cy, sy))):
            u = x[:, off + 0:off + half:2]
            v = x[:, off + 1:off + half:2]
            ss = -s if flip_sign else s
            out[:, off + 0:off + half:2] = u * c - v * ss
            out[:, off + 1:off + half:2] = u * ss + v * c
        return out

    out = Tensor._wrap(rotate(a.numpy(), False))
    return _rec(tape, out, (a,), lambda g: (rotate(g, True),))


def gaussian(shape: Sequence[int], rng: Rng) -> Tensor:
    """Standard normal tensor drawn from the given stream."""
    return rng.gaussian(tuple(shape))
