"""Coarse-global plus fine-local attention over 2D token grids.

The local branch restricts each query to a window of keys; near the
boundary the window is shifted inward instead of truncated, so every
query sees exactly (w+1)*(h+1) local keys. The global branch average-
pools rotary-encoded keys and raw values into coarse tokens that every
query may attend to. Two executors compute the same function:

* a dense reference that materializes the full mask and concatenated
  key/value sequence (differentiable, used as the correctness oracle and
  as the training path), and
* a blocked executor that walks query rows and gathers each query's
  contiguous key rectangle plus the coarse block (inference/bench path).

Because the inward shift keeps every window fully inside the grid, the
allowed local key set of a query is always an axis-aligned rectangle:
per axis with extent n and window m < n the keys span
[clamp(q - m/2, 0, n-1-m), +m]. The blocked executor relies on that
contiguity; the dense reference evaluates the mask definition directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import ops
from .autodiff import Tape
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass(frozen=True)
class WindowSpec:
    """Native local window extents, in tokens. Both must be even so the
    half-window used by the mask arithmetic is an integer."""

    w: int
    h: int

    def __post_init__(self):
        for name, v in (("w", self.w), ("h", self.h)):
            if v < 2 or v % 2:
                raise ContractError(f"window {name} must be a positive even integer, got {v}")


@dataclass(frozen=True)
class CoarseSpec:
    """Pooling ratio for the global branch; s=2 halves each spatial axis."""

    s: int = 2
    enabled: bool = True

    def __post_init__(self):
        if self.s < 1:
            raise ContractError(f"pool ratio must be >= 1, got {self.s}")


@dataclass(frozen=True)
class RoPEParams:
    base: float = 10000.0


@dataclass(frozen=True)
class TokenGrid:
    """(h_tok * w_tok, d) tokens in row-major (y, x) order."""

    h_tok: int
    w_tok: int
    tokens: Tensor

    def __post_init__(self):
        if self.h_tok < 1 or self.w_tok < 1:
            raise ContractError("token grid extents must be positive")
        n = self.h_tok * self.w_tok
        if self.tokens.ndim != 2 or self.tokens.shape[0] != n:
            raise ShapeError(f"expected ({n}, d) tokens, got {self.tokens.shape}")
        if self.tokens.shape[1] % 4:
            raise ContractError(f"embedding dim must be divisible by 4, got {self.tokens.shape[1]}")

    @property
    def d(self) -> int:
        return self.tokens.shape[1]

    @property
    def n(self) -> int:
        return self.h_tok * self.w_tok


# ---------------------------------------------------------------------------
# inward window mask
# ---------------------------------------------------------------------------


def inward_offset(q_coord: int, extent: int, win: int) -> int:
    """Per-query inward shift along one axis.

    Zero for interior queries; positive near a boundary, growing just
    enough that the shifted window stays inside [0, extent).
    """
    if not 0 <= q_coord < extent:
        raise ContractError(f"query coordinate {q_coord} outside [0, {extent})")
    if win % 2 or win < 2:
        raise ContractError(f"window must be even and positive, got {win}")
    if win >= extent:
        raise ContractError(f"inward shift needs win < extent, got {win} >= {extent}")
    return max(win // 2 - q_coord, win // 2 + q_coord - extent + 1, 0)


def _axis_offsets(extent: int, win: int) -> np.ndarray:
    """Vector of inward offsets for all coordinates; zeros when the window
    covers the whole axis (inward mechanism disabled)."""
    q = np.arange(extent)
    if win >= extent:
        return np.zeros(extent, dtype=np.int64)
    return np.maximum.reduce([win // 2 - q, win // 2 + q - extent + 1, np.zeros(extent, dtype=np.int64)])


def _axis_allowed(extent: int, win: int) -> np.ndarray:
    """(extent, extent) boolean: allowed[q, k] per the one-axis condition."""
    off = _axis_offsets(extent, win)
    q = np.arange(extent)[:, None]
    k = np.arange(extent)[None, :]
    return np.abs(q - k) <= win // 2 + off[:, None]


def mask_contains(q: tuple[int, int], k: tuple[int, int], grid: tuple[int, int],
                  win: WindowSpec) -> bool:
    """Whether query token q = (x, y) may attend key token k = (x, y).

    ``grid`` is (W, H). Both axis conditions must hold, each with the
    query's own inward offset.
    """
    w_tok, h_tok = grid
    xq, yq = q
    xk, yk = k
    for name, c, n in (("q.x", xq, w_tok), ("q.y", yq, h_tok), ("k.x", xk, w_tok), ("k.y", yk, h_tok)):
        if not 0 <= c < n:
            raise ContractError(f"{name}={c} outside grid extent {n}")
    dx = inward_offset(xq, w_tok, win.w) if win.w < w_tok else 0
    dy = inward_offset(yq, h_tok, win.h) if win.h < h_tok else 0
    return abs(xq - xk) <= win.w // 2 + dx and abs(yq - yk) <= win.h // 2 + dy


def build_dense_mask(grid: tuple[int, int], win: WindowSpec) -> Tensor:
    """(N, N) 0/1 mask, N = W*H, positions row-major: pos = y * W + x.

    Not symmetric in general: a boundary query's shifted window can reach
    an interior key whose own (unshifted) window excludes the boundary.
    """
    w_tok, h_tok = grid
    ax = _axis_allowed(w_tok, win.w)
    ay = _axis_allowed(h_tok, win.h)
    allowed = np.logical_and(ay[:, None, :, None], ax[None, :, None, :])
    n = w_tok * h_tok
    return Tensor._wrap(allowed.reshape(n, n).astype(np.float64))


def _check_window_supported(extent: int, win: int) -> None:
    # Windows must either fit inside the axis (inward shift active) or cover
    # it completely for every query. The in-between regime would truncate at
    # boundaries and break receptive-field uniformity, so it is rejected.
    if win < extent:
        return
    if win >= 2 * (extent - 1):
        return
    raise ContractError(
        f"window {win} on extent {extent} would truncate at boundaries; "
        f"use win < {extent} or win >= {2 * (extent - 1)}")


# ---------------------------------------------------------------------------
# rotary encoding and pooling over grids
# ---------------------------------------------------------------------------


def apply_rope_2d(grid: TokenGrid, params: RoPEParams = RoPEParams(), tape: Tape | None = None) -> TokenGrid:
    rotated = ops.rope2d(grid.tokens, grid.h_tok, grid.w_tok, params.base, tape)
    return TokenGrid(grid.h_tok, grid.w_tok, rotated)


def _pool_tokens(tokens: Tensor, h_tok: int, w_tok: int, s: int, tape: Tape | None) -> Tensor:
    d = tokens.shape[1]
    as_grid = ops.reshape(tokens, (h_tok, w_tok, d), tape)
    pooled = ops.avg_pool2d(as_grid, s, tape)
    return ops.reshape(pooled, ((h_tok // s) * (w_tok // s), d), tape)


def pool_kv(k: TokenGrid, v: TokenGrid, spec: CoarseSpec, tape: Tape | None = None) -> tuple[Tensor, Tensor]:
    """Average-pool keys and values into the coarse token set.

    Callers pass rotary-encoded keys: positional injection happens before
    pooling, and coarse tokens receive no further encoding.
    """
    if (k.h_tok, k.w_tok) != (v.h_tok, v.w_tok):
        raise ShapeError("key and value grids differ in extent")
    if k.h_tok % spec.s or k.w_tok % spec.s:
        raise ContractError(f"grid ({k.h_tok}, {k.w_tok}) not divisible by pool ratio {spec.s}")
    kc = _pool_tokens(k.tokens, k.h_tok, k.w_tok, spec.s, tape)
    vc = _pool_tokens(v.tokens, v.h_tok, v.w_tok, spec.s, tape)
    return kc, vc


# ---------------------------------------------------------------------------
# executors
# ---------------------------------------------------------------------------


class MacCounter:
    """Accumulates multiply-accumulate counts of score and output GEMMs."""

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


def dense_masked_attention(q: Tensor, k: Tensor, v: Tensor, logmask: Tensor,
                           tape: Tape | None = None, return_weights: bool = False,
                           counter: MacCounter | None = None):
    """softmax(q k^T / sqrt(d) + logmask) v, fully materialized.

    ``logmask`` is 0 on allowed entries and -inf on masked ones.
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError("attention operands must be rank-2")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"incompatible attention shapes q={q.shape} k={k.shape} v={v.shape}")
    if logmask.shape != (q.shape[0], k.shape[0]):
        raise ShapeError(f"logmask shape {logmask.shape} must be ({q.shape[0]}, {k.shape[0]})")
    d = q.shape[1]
    if counter is not None:
        counter.add(2 * q.shape[0] * k.shape[0] * d)
    scores = ops.scale(ops.matmul(q, ops.transpose(k, tape), tape), 1.0 / math.sqrt(d), tape)
    weights = ops.softmax_lastdim(ops.add(scores, logmask, tape), tape)
    out = ops.matmul(weights, v, tape)
    if return_weights:
        return out, weights
    return out


def logmask_from_mask(mask: Tensor, n_coarse: int = 0) -> Tensor:
    """0/1 mask -> additive log-mask, with n_coarse always-visible columns
    appended on the right."""
    m = mask.numpy()
    log = np.where(m > 0.5, 0.0, -np.inf)
    if n_coarse:
        log = np.concatenate([log, np.zeros((m.shape[0], n_coarse))], axis=1)
    return Tensor._wrap(log)


def _validate_attention_inputs(q: TokenGrid, k: TokenGrid, v: TokenGrid,
                               win: WindowSpec, coarse: CoarseSpec) -> None:
    if (q.h_tok, q.w_tok, q.d) != (k.h_tok, k.w_tok, k.d) or (k.h_tok, k.w_tok, k.d) != (v.h_tok, v.w_tok, v.d):
        raise ShapeError("q, k, v grids must agree in extent and dim")
    _check_window_supported(q.w_tok, win.w)
    _check_window_supported(q.h_tok, win.h)
    if coarse.enabled and (q.h_tok % coarse.s or q.w_tok % coarse.s):
        raise ContractError(f"grid ({q.h_tok}, {q.w_tok}) not divisible by pool ratio {coarse.s}")


def gclfa_reference(q: TokenGrid, k: TokenGrid, v: TokenGrid, win: WindowSpec,
                    coarse: CoarseSpec, rope: RoPEParams = RoPEParams(),
                    tape: Tape | None = None, return_weights: bool = False,
                    multiplicative_mask: bool = False, counter: MacCounter | None = None):
    """Dense reference path: explicit mask, explicit concatenation.

    ``multiplicative_mask`` switches to multiplying the raw logits by the
    0/1 mask instead of adding -inf. That variant does not exclude masked
    keys (a zeroed logit still receives weight exp(0)); it exists only for
    side-by-side comparison and is never the default.
    """
    _validate_attention_inputs(q, k, v, win, coarse)
    h_tok, w_tok, d = q.h_tok, q.w_tok, q.d
    n = q.n
    q_r = apply_rope_2d(q, rope, tape)
    k_r = apply_rope_2d(k, rope, tape)
    if coarse.enabled:
        kc, vc = pool_kv(k_r, v, coarse, tape)
        k_cat = ops.concat([k_r.tokens, kc], axis=0, tape=tape)
        v_cat = ops.concat([v.tokens, vc], axis=0, tape=tape)
        n_coarse = kc.shape[0]
    else:
        k_cat, v_cat, n_coarse = k_r.tokens, v.tokens, 0
    mask = build_dense_mask((w_tok, h_tok), win)
    if not multiplicative_mask:
        logmask = logmask_from_mask(mask, n_coarse)
        return dense_masked_attention(q_r.tokens, k_cat, v_cat, logmask, tape,
                                      return_weights=return_weights, counter=counter)
    # literal variant: scores * M inside the softmax
    m = mask.numpy()
    if n_coarse:
        m = np.concatenate([m, np.ones((n, n_coarse))], axis=1)
    if counter is not None:
        counter.add(2 * n * k_cat.shape[0] * d)
    scores = ops.scale(ops.matmul(q_r.tokens, ops.transpose(k_cat, tape), tape), 1.0 / math.sqrt(d), tape)
    weights = ops.softmax_lastdim(ops.mul(scores, Tensor._wrap(m), tape), tape)
    out = ops.matmul(weights, v_cat, tape)
    return (out, weights) if return_weights else out


def _axis_window_starts(extent: int, win: int) -> tuple[np.ndarray, int]:
    """Window start per query coordinate and the (uniform) window length."""
    length = min(win + 1, extent)
    starts = np.clip(np.arange(extent) - win // 2, 0, extent - length)
    return starts, length


def gclfa_blocked(q: TokenGrid, k: TokenGrid, v: TokenGrid, win: WindowSpec,
                  coarse: CoarseSpec, rope: RoPEParams = RoPEParams(),
                  counter: MacCounter | None = None, threads: int = 1) -> Tensor:
    """Tiled executor: one tile per query row.

    Each tile takes the contiguous band of key rows its queries may see,
    slides a length-(w+1) view along x, gathers per-query windows, and
    appends the coarse block. No (N, N) intermediate is ever built.
    """
    _validate_attention_inputs(q, k, v, win, coarse)
    h_tok, w_tok, d = q.h_tok, q.w_tok, q.d
    n = q.n
    inv_sqrt_d = 1.0 / math.sqrt(d)

    q_r = apply_rope_2d(q, rope).tokens.numpy()
    k_r = apply_rope_2d(k, rope).tokens.numpy()
    vn = v.tokens.numpy()

    if coarse.enabled:
        s = coarse.s
        kc = k_r.reshape(h_tok, w_tok, d).reshape(h_tok // s, s, w_tok // s, s, d).mean(axis=(1, 3))
        vc = vn.reshape(h_tok, w_tok, d).reshape(h_tok // s, s, w_tok // s, s, d).mean(axis=(1, 3))
        kc = kc.reshape(-1, d)
        vc = vc.reshape(-1, d)
        n_coarse = kc.shape[0]
        kc_t = kc.T
    else:
        n_coarse = 0

    xlo, lx = _axis_window_starts(w_tok, win.w)
    ylo, ly = _axis_window_starts(h_tok, win.h)
    l_local = lx * ly

    k3 = k_r.reshape(h_tok, w_tok, d)
    v3 = vn.reshape(h_tok, w_tok, d)
    q3 = q_r.reshape(h_tok, w_tok, d)
    out = np.empty((n, d))

    def run_tile(y: int) -> None:
        band = slice(ylo[y], ylo[y] + ly)
        # (ly, W-lx+1, d, lx) strided views, then one gather per band
        k_sl = np.lib.stride_tricks.sliding_window_view(k3[band], lx, axis=1)
        v_sl = np.lib.stride_tricks.sliding_window_view(v3[band], lx, axis=1)
        k_loc = k_sl[:, xlo].transpose(1, 0, 3, 2).reshape(w_tok, l_local, d)
        v_loc = v_sl[:, xlo].transpose(1, 0, 3, 2).reshape(w_tok, l_local, d)
        q_row = q3[y]
        scores = np.einsum("wd,wld->wl", q_row, k_loc) * inv_sqrt_d
        if n_coarse:
            scores = np.concatenate([scores, (q_row @ kc_t) * inv_sqrt_d], axis=1)
        scores -= scores.max(axis=1, keepdims=True)
        np.exp(scores, out=scores)
        scores /= scores.sum(axis=1, keepdims=True)
        res = np.einsum("wl,wld->wd", scores[:, :l_local], v_loc)
        if n_coarse:
            res += scores[:, l_local:] @ vc
        out[y * w_tok:(y + 1) * w_tok] = res

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run_tile, range(h_tok)))
    else:
        for y in range(h_tok):
            run_tile(y)

    if counter is not None:
        counter.add(2 * n * (l_local + n_coarse) * d)
    return Tensor._wrap(out)


def gclfa_attention(q: TokenGrid, k: TokenGrid, v: TokenGrid, win: WindowSpec,
                    coarse: CoarseSpec, rope: RoPEParams = RoPEParams(),
                    executor: str = "blocked", tape: Tape | None = None,
                    counter: MacCounter | None = None, threads: int = 1) -> Tensor:
    """Single-head attention combining the local window and coarse branch.

    Multi-head callers loop over equal d-slices with a shared mask. The
    blocked executor is not differentiable; pass executor="reference" to
    record on a tape.
    """
    if executor == "blocked":
        if tape is not None:
            raise ContractError("blocked executor does not record on a tape; use executor='reference'")
        return gclfa_blocked(q, k, v, win, coarse, rope, counter=counter, threads=threads)
    if executor == "reference":
        return gclfa_reference(q, k, v, win, coarse, rope, tape, counter=counter)
    raise ContractError(f"unknown executor {executor!r}")


# ---------------------------------------------------------------------------
# cost model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskStats:
    keys_per_query: dict[int, int]
    local_keys: int
    coarse_keys: int
    flops_dense: int
    flops_sparse: int
    reduction: float


def mask_stats(grid: tuple[int, int], win: WindowSpec, coarse: CoarseSpec, d: int = 16) -> MaskStats:
    """Exact multiply-accumulate counts for one attention call.

    Dense full attention over N tokens costs 2*N*N*d (scores plus weighted
    sum); the windowed+coarse scheme costs 2*N*(L+C)*d. ``reduction`` is
    their ratio, so values below 1 mean the scheme is more expensive than
    dense (the honest outcome for s=1, where the coarse branch duplicates
    every key).
    """
    w_tok, h_tok = grid
    _check_window_supported(w_tok, win.w)
    _check_window_supported(h_tok, win.h)
    n = w_tok * h_tok
    off_x = _axis_offsets(w_tok, win.w)
    off_y = _axis_offsets(h_tok, win.h)
    q = np.arange(w_tok)
    width_x = np.minimum(w_tok - 1, q + win.w // 2 + off_x) - np.maximum(0, q - win.w // 2 - off_x) + 1
    q = np.arange(h_tok)
    width_y = np.minimum(h_tok - 1, q + win.h // 2 + off_y) - np.maximum(0, q - win.h // 2 - off_y) + 1
    counts = np.outer(width_y, width_x).ravel()
    hist: dict[int, int] = {}
    for c in counts:
        hist[int(c)] = hist.get(int(c), 0) + 1
    if len(hist) != 1:
        raise ContractError(f"non-uniform receptive field {sorted(hist)}; unsupported window config")
    local = int(counts[0])
    if coarse.enabled:
        if h_tok % coarse.s or w_tok % coarse.s:
            raise ContractError(f"grid ({h_tok}, {w_tok}) not divisible by pool ratio {coarse.s}")
        c_keys = n // (coarse.s * coarse.s)
    else:
        c_keys = 0
    flops_dense = 2 * n * n * d
    flops_sparse = 2 * n * (local + c_keys) * d
    return MaskStats(
        keys_per_query=hist,
        local_keys=local,
        coarse_keys=c_keys,
        flops_dense=flops_dense,
        flops_sparse=flops_sparse,
        reduction=flops_dense / flops_sparse,
    )
