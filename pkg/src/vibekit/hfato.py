"""Degradation-based training objective for high-frequency recovery.

The clean latent is passed through a downsample-upsample operator that
strips detail above the pooling cutoff, noise is injected on the
degraded latent, and the model's velocity prediction is used to
reconstruct a latent that is supervised against the original *clean*
one. A Laplacian-stencil energy quantifies how much fine detail an
image carries.

Two noising variants exist. "interpolated" keeps the usual schedule,
x_t = (1-t) * deg(x0) + t * eps, so the reconstruction identity
x_t - t * v recovers deg(x0) exactly for the oracle velocity at every t.
"literal_additive" uses x_t = deg(x0) + t * eps, which skips the (1-t)
attenuation; it is kept selectable for comparison but is not the
default, because at large t it no longer recovers the degraded latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError, ShapeError
from .tensor import Tensor

_UPSAMPLERS = {"nearest": ops.nearest_upsample2d, "bilinear": ops.bilinear_upsample2d}


@dataclass(frozen=True)
class DegradationConfig:
    factor: int = 2
    up: str = "nearest"

    def __post_init__(self):
        if self.factor < 1:
            raise ContractError(f"degradation factor must be >= 1, got {self.factor}")
        if self.up not in _UPSAMPLERS:
            raise ContractError(f"unknown upsampling kind {self.up!r}; use 'nearest' or 'bilinear'")


def degrade(x0: Tensor, cfg: DegradationConfig, tape=None) -> Tensor:
    """Average-pool by the factor, then upsample back to the input extents."""
    if cfg.factor == 1:
        return x0
    pooled = ops.avg_pool2d(x0, cfg.factor, tape)
    return _UPSAMPLERS[cfg.up](pooled, cfg.factor, tape)


@dataclass(frozen=True)
class HFATOBatch:
    x0: Tensor
    x0_deg: Tensor
    eps: Tensor
    t: float
    xt: Tensor
    variant: str

    def __post_init__(self):
        if self.variant == "interpolated":
            expected = (1.0 - self.t) * self.x0_deg.numpy() + self.t * self.eps.numpy()
        elif self.variant == "literal_additive":
            expected = self.x0_deg.numpy() + self.t * self.eps.numpy()
        else:
            raise ContractError(f"unknown variant {self.variant!r}")
        if np.max(np.abs(expected - self.xt.numpy()), initial=0.0) > 1e-12:
            raise ContractError("HFATOBatch xt inconsistent with its variant")


def hfato_forward(x0: Tensor, eps: Tensor, t: float, cfg: DegradationConfig,
                  variant: str = "interpolated") -> HFATOBatch:
    """Degrade, then noise. The two variants agree at t = 0 and diverge as
    t grows (at t = 1 one is pure noise, the other degraded-plus-noise)."""
    if x0.shape != eps.shape:
        raise ShapeError(f"shapes differ: {x0.shape} vs {eps.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    deg = degrade(x0, cfg)
    if variant == "interpolated":
        xt = Tensor._wrap((1.0 - t) * deg.numpy() + t * eps.numpy())
    elif variant == "literal_additive":
        xt = Tensor._wrap(deg.numpy() + t * eps.numpy())
    else:
        raise ContractError(f"unknown variant {variant!r}")
    return HFATOBatch(x0=x0, x0_deg=deg, eps=eps, t=t, xt=xt, variant=variant)


def reconstruct_x0(xt: Tensor, v: Tensor, t: float, tape=None) -> Tensor:
    """x_t - t * v, the one-shot latent estimate under the linear schedule."""
    if xt.shape != v.shape:
        raise ShapeError(f"shapes differ: {xt.shape} vs {v.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return ops.sub(xt, ops.scale(v, t, tape), tape)


def hfato_loss(x0_hat: Tensor, x0_clean: Tensor, tape=None) -> Tensor:
    """Mean squared error against the clean (not degraded) latent.

    Mean rather than sum normalization keeps tolerances independent of
    grid size.
    """
    if x0_hat.shape != x0_clean.shape:
        raise ShapeError(f"shapes differ: {x0_hat.shape} vs {x0_clean.shape}")
    diff = ops.sub(x0_hat, x0_clean, tape)
    return ops.reduce_mean(ops.mul(diff, diff, tape), tape)


def hf_energy(x: Tensor) -> float:
    """Mean squared 3x3 Laplacian response over interior pixels.

    Stencil [[0,1,0],[1,-4,1],[0,1,0]], valid region only; a constant
    image scores 0 and a +-1 checkerboard scores exactly 64.
    """
    if x.ndim != 2:
        raise ShapeError(f"hf_energy needs a (H, W) tensor, got {x.shape}")
    h, w = x.shape
    if h < 3 or w < 3:
        raise ContractError(f"hf_energy needs extents >= 3, got ({h}, {w})")
    a = x.numpy()
    resp = (a[:-2, 1:-1] + a[2:, 1:-1] + a[1:-1, :-2] + a[1:-1, 2:] - 4.0 * a[1:-1, 1:-1])
    return float(np.mean(resp * resp))
