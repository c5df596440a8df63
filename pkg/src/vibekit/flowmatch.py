"""Flow-matching interpolation, losses, and deterministic ODE sampling.

Uses the linear schedule alpha(t) = 1 - t, sigma(t) = t on [0, 1], under
which the regression target for the velocity field is eps - x0 and the
reverse-time probability-flow ODE dx = v(x, t) dt carries noise (t=1)
back to data (t=0). Closed-form oracle fields for point-mass and Gaussian
data are provided so the samplers can be tested without any trained model.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .errors import ContractError, IntegrationDivergedError, ShapeError
from .tensor import Tensor

# A velocity field is any callable v(x: Tensor, t: float) -> Tensor of x's shape.
VelocityField = Callable[[Tensor, float], Tensor]


@dataclass(frozen=True)
class Schedule:
    """Interpolation weights; only the linear family is supported."""

    kind: str = "linear"

    def __post_init__(self):
        if self.kind != "linear":
            raise ContractError(f"unsupported schedule kind: {self.kind!r}")

    def alpha(self, t: float) -> float:
        return 1.0 - t

    def sigma(self, t: float) -> float:
        return float(t)


LINEAR = Schedule()


def _check_t(t: float) -> float:
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"t must lie in [0, 1], got {t}")
    return t


def interpolate(x0: Tensor, eps: Tensor, t: float, sched: Schedule = LINEAR) -> Tensor:
    """alpha(t) * x0 + sigma(t) * eps."""
    if x0.shape != eps.shape:
        raise ShapeError(f"interpolate shapes differ: {x0.shape} vs {eps.shape}")
    t = _check_t(t)
    return Tensor._wrap(sched.alpha(t) * x0.numpy() + sched.sigma(t) * eps.numpy())


def velocity_target(x0: Tensor, eps: Tensor) -> Tensor:
    """eps - x0; constant in t under the linear schedule."""
    if x0.shape != eps.shape:
        raise ShapeError(f"velocity_target shapes differ: {x0.shape} vs {eps.shape}")
    return Tensor._wrap(eps.numpy() - x0.numpy())


def fm_loss(v_pred: Tensor, v_target: Tensor, weight: float = 1.0, tape=None) -> Tensor:
    """weight * mean((v_pred - v_target)^2) as a scalar Tensor."""
    if v_pred.shape != v_target.shape:
        raise ShapeError(f"fm_loss shapes differ: {v_pred.shape} vs {v_target.shape}")
    if not weight > 0:
        raise ContractError(f"fm_loss weight must be positive, got {weight}")
    diff = ops.sub(v_pred, v_target, tape)
    return ops.scale(ops.reduce_mean(ops.mul(diff, diff, tape), tape), weight, tape)


@dataclass(frozen=True)
class FlowBatch:
    """One training sample: endpoints, time, interpolant, and target."""

    x0: Tensor
    eps: Tensor
    t: float
    xt: Tensor
    v_target: Tensor

    def __post_init__(self):
        expected = interpolate(self.x0, self.eps, self.t)
        if np.max(np.abs(expected.numpy() - self.xt.numpy()), initial=0.0) > 1e-12:
            raise ContractError("FlowBatch xt is not the schedule interpolant of (x0, eps, t)")
        vt = velocity_target(self.x0, self.eps)
        if np.max(np.abs(vt.numpy() - self.v_target.numpy()), initial=0.0) > 0.0:
            raise ContractError("FlowBatch v_target must equal eps - x0")


def make_flow_batch(x0: Tensor, eps: Tensor, t: float) -> FlowBatch:
    return FlowBatch(x0, eps, _check_t(t), interpolate(x0, eps, t), velocity_target(x0, eps))


# ---------------------------------------------------------------------------
# probability-flow ODE integration
# ---------------------------------------------------------------------------


def integrate(v: VelocityField, x_start: Tensor, t_start: float, steps: int,
              method: str = "euler") -> Tensor:
    """Integrate dx = v(x, t) dt from t_start down to 0 on a uniform grid.

    The grid is t_k = t_start * (1 - k/steps), so the field is never
    evaluated at t = 0 (the last evaluation sits at t_start/steps). Heun
    runs a two-stage predictor-corrector and falls back to Euler on the
    final step, where the corrector stage would otherwise need v(., 0).
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    if method not in ("euler", "heun"):
        raise ContractError(f"unknown method {method!r}")
    t_start = float(t_start)
    if not 0.0 < t_start <= 1.0:
        raise ContractError(f"t_start must lie in (0, 1], got {t_start}")
    x = x_start.numpy().copy()
    dt = t_start / steps
    for k in range(steps):
        t_k = t_start * (1.0 - k / steps)
        v1 = v(Tensor._wrap(x), t_k).numpy()
        if v1.shape != x.shape:
            raise ShapeError(f"velocity field returned shape {v1.shape} for state shape {x.shape}")
        if method == "euler" or k == steps - 1:
            x = x - dt * v1
        else:
            x_pred = x - dt * v1
            v2 = v(Tensor._wrap(x_pred), t_k - dt).numpy()
            x = x - 0.5 * dt * (v1 + v2)
        if not np.isfinite(x).all():
            raise IntegrationDivergedError(k)
    return Tensor._wrap(x)


def sample_ode(v: VelocityField, xT: Tensor, steps: int, method: str = "euler") -> Tensor:
    """Full reverse pass from pure noise at t = 1."""
    return integrate(v, xT, 1.0, steps, method)


# ---------------------------------------------------------------------------
# closed-form oracle fields
# ---------------------------------------------------------------------------


def point_mass_velocity(mu: Tensor) -> VelocityField:
    """Exact field for a point-mass data distribution at mu: v = (x - mu)/t.

    One Euler step of size dt from t = dt lands exactly on mu, for any
    step count, which makes this the sharpest sampler test available.
    """
    m = mu.numpy()

    def v(x: Tensor, t: float) -> Tensor:
        return Tensor._wrap((x.numpy() - m) / t)

    return v


@dataclass(frozen=True)
class GaussianOracle:
    """Exact marginal velocity for data ~ N(mean, var * I) under the
    linear schedule. Exposes both conditional expectations so they can be
    unit-tested separately; the field itself is their difference."""

    mean: Tensor
    var: float

    def __post_init__(self):
        if not self.var > 0:
            raise ContractError(f"var must be positive, got {self.var}")

    def _marginal_var(self, t: float) -> float:
        return (1.0 - t) ** 2 * self.var + t * t

    def _centered(self, x: Tensor, t: float) -> np.ndarray:
        return x.numpy() - (1.0 - t) * self.mean.numpy()

    def cond_x0(self, x: Tensor, t: float) -> Tensor:
        """E[x0 | x_t = x]."""
        s2 = self._marginal_var(t)
        return Tensor._wrap(self.mean.numpy() + (1.0 - t) * self.var / s2 * self._centered(x, t))

    def cond_eps(self, x: Tensor, t: float) -> Tensor:
        """E[eps | x_t = x]."""
        s2 = self._marginal_var(t)
        return Tensor._wrap(t / s2 * self._centered(x, t))

    def __call__(self, x: Tensor, t: float) -> Tensor:
        return Tensor._wrap(self.cond_eps(x, t).numpy() - self.cond_x0(x, t).numpy())


def gaussian_oracle_velocity(mean: Tensor, var: float) -> GaussianOracle:
    return GaussianOracle(mean=mean, var=float(var))
