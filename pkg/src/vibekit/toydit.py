"""A two-layer transformer velocity model small enough to train on a CPU.

Tokens are single-channel grid cells lifted into d dimensions by a fixed
unit vector; a sinusoidal time embedding is added to every token. Each
block applies attention (full dense, or the windowed+coarse scheme) and
a SiLU MLP with residual connections, and the predicted velocity is the
*accumulated residual update* projected back to one channel. That makes
the all-weights-zero model output exactly zero, and it keeps every
parameter inside the six named weight matrices per block, which is what
the adapter machinery targets.

Also here: the synthetic dataset (low-frequency layout plus faint
above-cutoff texture), the Adam optimizer, the adapter-only training
loop, and the two-resolution generate/upsample/renoise/refine sampler.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import flowmatch, hfato, ops
from .autodiff import Tape
from .checkpoint import Checkpoint
from .errors import ContractError, ShapeError, TrainingDivergedError
from .gclfa import CoarseSpec, RoPEParams, TokenGrid, WindowSpec, dense_masked_attention, gclfa_attention
from .relay_lora import LoRAAdapter, compose_inference, init_adapter
from .rng import Rng
from .tensor import Tensor

# pcg32 stream ids; keeping them distinct keeps every consumer of a given
# seed on an independent substream.
STREAM_INIT = 1
STREAM_STAGE1 = 2
STREAM_STAGE2 = 3
STREAM_SAMPLE_LOW = 5
STREAM_SAMPLE_REFINE = 6
STREAM_EVAL = 7
_STREAM_DATA_BASE = 0x10000
_EMBED_SEED = 982451653

LORA_TARGET_MODULES = ("q", "k", "v", "o", "ffn.0", "ffn.2")


@dataclass(frozen=True)
class ToyDiTConfig:
    grid: tuple[int, int] = (8, 8)  # (h_tok, w_tok)
    d: int = 16
    n_layers: int = 2
    n_heads: int = 1
    d_ff: int = 32
    attn_mode: str = "dense"
    window: WindowSpec | None = None
    coarse: CoarseSpec | None = None
    rope: RoPEParams = field(default_factory=RoPEParams)
    time_scale: float = 1000.0

    def __post_init__(self):
        if self.d % 4:
            raise ContractError(f"d must be divisible by 4, got {self.d}")
        if self.d % self.n_heads or (self.d // self.n_heads) % 4:
            raise ContractError(f"head dim must be divisible by 4: d={self.d}, heads={self.n_heads}")
        if self.attn_mode not in ("dense", "gclfa"):
            raise ContractError(f"unknown attention mode {self.attn_mode!r}")
        if self.attn_mode == "gclfa" and (self.window is None or self.coarse is None):
            raise ContractError("gclfa mode needs window and coarse specs")


def weight_names(n_layers: int) -> list[str]:
    names = []
    for i in range(n_layers):
        for m in ("q", "k", "v", "o"):
            names.append(f"blocks.{i}.attn.{m}")
        names.append(f"blocks.{i}.ffn.0")
        names.append(f"blocks.{i}.ffn.2")
    return names


def weight_shape(name: str, d: int, d_ff: int) -> tuple[int, int]:
    if name.endswith(".ffn.0"):
        return (d_ff, d)
    if name.endswith(".ffn.2"):
        return (d, d_ff)
    return (d, d)


def expand_targets(modules: Sequence[str], n_layers: int) -> list[str]:
    """Module names like "q" or "ffn.0" -> full per-block tensor names."""
    out = []
    for m in modules:
        if m not in LORA_TARGET_MODULES:
            raise ContractError(f"unknown target module {m!r}; choose from {LORA_TARGET_MODULES}")
    for i in range(n_layers):
        for m in modules:
            out.append(f"blocks.{i}.attn.{m}" if m in ("q", "k", "v", "o") else f"blocks.{i}.{m}")
    return out


def init_weights(cfg: ToyDiTConfig, rng: Rng) -> Checkpoint:
    """Seeded Gaussian base weights, std 1/sqrt(fan_in)."""
    tensors: dict[str, Tensor] = {}
    for name in weight_names(cfg.n_layers):
        d_out, d_in = weight_shape(name, cfg.d, cfg.d_ff)
        tensors[name] = Tensor._wrap(rng.gaussian_array((d_out, d_in)) / math.sqrt(d_in))
    meta = {
        "stage": "base",
        "d": str(cfg.d),
        "n_layers": str(cfg.n_layers),
        "n_heads": str(cfg.n_heads),
        "d_ff": str(cfg.d_ff),
    }
    return Checkpoint(tensors, meta)


_EMBED_CACHE: dict[int, np.ndarray] = {}


def _embed_vector(d: int) -> np.ndarray:
    # Fixed unit-norm lift shared by every model, so unembed(embed(x)) == x.
    e = _EMBED_CACHE.get(d)
    if e is None:
        e = Rng(_EMBED_SEED, stream=d).gaussian_array((d,))
        e /= np.linalg.norm(e)
        _EMBED_CACHE[d] = e
    return e


def _time_embedding(t: float, d: int, scale: float) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = t * scale * freqs
    return np.concatenate([np.cos(args), np.sin(args)])


class ToyDiT:
    """Velocity model over one (h_tok, w_tok) single-channel grid.

    Weights live in a Checkpoint; ``forward`` optionally takes a params
    override (used during training, where targeted weights are rebuilt on
    the tape as base + adapter delta) and a Tape for differentiation.
    """

    def __init__(self, cfg: ToyDiTConfig, weights: Checkpoint):
        self.cfg = cfg
        self.weights = weights
        for name in weight_names(cfg.n_layers):
            got = weights.get(name).shape
            want = weight_shape(name, cfg.d, cfg.d_ff)
            if got != want:
                raise ShapeError(f"weight {name!r} has shape {got}, expected {want}")

    def velocity_field(self, attn_executor: str | None = None) -> flowmatch.VelocityField:
        return lambda x, t: self.forward(x, t, attn_executor=attn_executor)

    def forward(self, xt: Tensor, t: float, *, params: dict[str, Tensor] | None = None,
                tape: Tape | None = None, attn_executor: str | None = None) -> Tensor:
        cfg = self.cfg
        if xt.shape != cfg.grid:
            raise ShapeError(f"input shape {xt.shape} does not match configured grid {cfg.grid}")
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"t must lie in [0, 1], got {t}")
        h_tok, w_tok = cfg.grid
        n = h_tok * w_tok
        if params is None:
            params = self.weights.tensors
        executor = attn_executor or ("reference" if tape is not None else "blocked")

        e = _embed_vector(cfg.d)
        tokens0 = Tensor._wrap(np.outer(xt.numpy().reshape(n), e))
        temb = Tensor._wrap(_time_embedding(t, cfg.d, cfg.time_scale))
        h0 = ops.add(tokens0, temb, tape)
        h = h0
        for i in range(cfg.n_layers):
            h = ops.add(h, self._attention(h, i, params, tape, executor), tape)
            h = ops.add(h, self._ffn(h, i, params, tape), tape)
        v_tokens = ops.sub(h, h0, tape)
        v_flat = ops.matmul(v_tokens, Tensor._wrap(e[:, None]), tape)
        return ops.reshape(v_flat, (h_tok, w_tok), tape)

    def _attention(self, h: Tensor, layer: int, params, tape, executor: str) -> Tensor:
        cfg = self.cfg
        h_tok, w_tok = cfg.grid
        n = h_tok * w_tok
        q = ops.matmul(h, ops.transpose(params[f"blocks.{layer}.attn.q"], tape), tape)
        k = ops.matmul(h, ops.transpose(params[f"blocks.{layer}.attn.k"], tape), tape)
        v = ops.matmul(h, ops.transpose(params[f"blocks.{layer}.attn.v"], tape), tape)
        dh = cfg.d // cfg.n_heads
        outs = []
        for head in range(cfg.n_heads):
            if cfg.n_heads == 1:
                qh, kh, vh = q, k, v
            else:
                lo, hi = head * dh, (head + 1) * dh
                qh = ops.slice_lastdim(q, lo, hi, tape)
                kh = ops.slice_lastdim(k, lo, hi, tape)
                vh = ops.slice_lastdim(v, lo, hi, tape)
            if cfg.attn_mode == "dense":
                logmask = Tensor._wrap(np.zeros((n, n)))
                outs.append(dense_masked_attention(qh, kh, vh, logmask, tape))
            else:
                grids = (TokenGrid(h_tok, w_tok, qh), TokenGrid(h_tok, w_tok, kh), TokenGrid(h_tok, w_tok, vh))
                outs.append(gclfa_attention(*grids, cfg.window, cfg.coarse, cfg.rope,
                                            executor=executor, tape=tape))
        merged = outs[0] if cfg.n_heads == 1 else ops.concat(outs, axis=1, tape=tape)
        return ops.matmul(merged, ops.transpose(params[f"blocks.{layer}.attn.o"], tape), tape)

    def _ffn(self, h: Tensor, layer: int, params, tape) -> Tensor:
        up = ops.matmul(h, ops.transpose(params[f"blocks.{layer}.ffn.0"], tape), tape)
        return ops.matmul(ops.silu(up, tape), ops.transpose(params[f"blocks.{layer}.ffn.2"], tape), tape)


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticDataset:
    """Deterministic per (seed, index): 3 low-frequency sinusoids for the
    layout plus a faint texture of 3 random-phase sinusoids whose modes sit
    above the factor-2 degradation cutoff. Values clamped to [-1, 1]."""

    seed: int
    h: int
    w: int
    size: int = 32

    def sample(self, index: int) -> Tensor:
        if not 0 <= index < self.size:
            raise ContractError(f"index {index} outside [0, {self.size})")
        rng = Rng(self.seed, stream=_STREAM_DATA_BASE + index)
        ys, xs = np.mgrid[0:self.h, 0:self.w]
        img = np.zeros((self.h, self.w))
        for _ in range(3):
            fx, fy = rng.randint(3), rng.randint(3)
            if fx == 0 and fy == 0:
                fx = 1
            amp = 0.3 + 0.5 * float(rng.uniform(1)[0])
            phase = 2.0 * math.pi * float(rng.uniform(1)[0])
            img += amp * np.sin(2.0 * math.pi * (fx * xs / self.w + fy * ys / self.h) + phase)
        # texture strictly above the cutoff preserved by factor-2 pooling
        tex = np.zeros((self.h, self.w))
        for _ in range(3):
            fx = self.w // 4 + 1 + rng.randint(max(1, self.w // 2 - self.w // 4))
            fy = self.h // 4 + 1 + rng.randint(max(1, self.h // 2 - self.h // 4))
            phase = 2.0 * math.pi * float(rng.uniform(1)[0])
            tex += np.sin(2.0 * math.pi * (fx * xs / self.w + fy * ys / self.h) + phase)
        img += 0.2 * tex / 3.0
        return Tensor._wrap(np.clip(img, -1.0, 1.0))


# ---------------------------------------------------------------------------
# optimizer and training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> dict[str, Tensor]:
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        out = {}
        for name, p in params.items():
            g = grads[name]
            m = self.m.get(name)
            if m is None:
                m = np.zeros(p.shape)
                self.v[name] = np.zeros(p.shape)
            m = c.beta1 * m + (1.0 - c.beta1) * g
            v = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = Tensor._wrap(p.numpy() - c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps))
        return out


@dataclass
class TrainResult:
    adapters: list[LoRAAdapter]
    losses: list[float]


def _fm_weight_value(kind: str | Callable[[float], float], t: float) -> float:
    if callable(kind):
        return float(kind(t))
    if kind == "unit":
        return 1.0
    if kind == "sigma_sq":
        return t * t
    raise ContractError(f"unknown fm weight {kind!r}; use 'unit', 'sigma_sq', or a callable")


def train(model: ToyDiT, dataset: SyntheticDataset, objective: str,
          lora_targets: Sequence[str], steps: int, opt: AdamConfig, rng: Rng, *,
          rank: int = 8, alpha: float = 8.0,
          hfato_cfg: hfato.DegradationConfig | None = None,
          hfato_variant: str = "interpolated",
          fm_weight: str | Callable[[float], float] = "unit",
          t_range: tuple[float, float] = (0.02, 0.98)) -> TrainResult:
    """Adapter-only training; the base checkpoint is never touched.

    Each step draws t uniformly from ``t_range`` (clipped away from the
    endpoints so oracle comparisons stay non-singular), rebuilds every
    targeted weight as base + delta on a fresh tape, and updates only the
    adapter factors. Deterministic given the rng stream. Returns the
    adapters and the per-step loss curve; a non-finite loss aborts with
    the step index.
    """
    if objective not in ("fm", "hfato"):
        raise ContractError(f"unknown objective {objective!r}")
    if objective == "hfato" and hfato_cfg is None:
        hfato_cfg = hfato.DegradationConfig()
    full_targets = expand_targets(lora_targets, model.cfg.n_layers)
    if not full_targets:
        raise ContractError("no trainable parameters: empty adapter target list")

    cfg = model.cfg
    adapters = {
        name: init_adapter(name, *weight_shape(name, cfg.d, cfg.d_ff), rank=rank, alpha=alpha, rng=rng)
        for name in full_targets
    }
    optimizer = Adam(opt)
    losses: list[float] = []

    for step in range(steps):
        x0 = dataset.sample(step % dataset.size)
        t = rng.uniform_range(t_range[0], t_range[1])
        eps = rng.gaussian(x0.shape)

        tape = Tape()
        params = dict(model.weights.tensors)
        leaves: dict[str, Tensor] = {}
        for name, ad in adapters.items():
            leaves[f"{name}.lora_A"] = ad.a
            leaves[f"{name}.lora_B"] = ad.b
            d_t = ops.scale(ops.matmul(ad.b, ad.a, tape), ad.alpha / ad.rank, tape)
            params[name] = ops.add(params[name], d_t, tape)

        if objective == "fm":
            xt = flowmatch.interpolate(x0, eps, t)
            v_pred = model.forward(xt, t, params=params, tape=tape)
            loss = flowmatch.fm_loss(v_pred, flowmatch.velocity_target(x0, eps),
                                     _fm_weight_value(fm_weight, t), tape)
        else:
            batch = hfato.hfato_forward(x0, eps, t, hfato_cfg, hfato_variant)
            v_pred = model.forward(batch.xt, t, params=params, tape=tape)
            x0_hat = hfato.reconstruct_x0(batch.xt, v_pred, t, tape)
            loss = hfato.hfato_loss(x0_hat, x0, tape)

        loss_val = loss.item()
        if not math.isfinite(loss_val):
            raise TrainingDivergedError(step)
        losses.append(loss_val)

        tape.backward(loss)
        grads = {name: tape.grad(leaf).numpy() for name, leaf in leaves.items()}
        new_leaves = optimizer.step(leaves, grads)
        adapters = {
            name: replace(ad, a=new_leaves[f"{name}.lora_A"], b=new_leaves[f"{name}.lora_B"])
            for name, ad in adapters.items()
        }

    return TrainResult(adapters=list(adapters.values()), losses=losses)


def pretrain_base(cfg: ToyDiTConfig, dataset: SyntheticDataset, steps: int, opt: AdamConfig,
                  rng: Rng, t_range: tuple[float, float] = (0.02, 0.98)) -> Checkpoint:
    """Full-weight velocity training of a fresh base model.

    Stands in for the pretrained backbone the adapter stages assume: the
    resulting checkpoint generates layout-like grids at its native
    resolution instead of noise. All weights train here (this is the one
    place that is not adapter-only); the returned checkpoint is tagged as
    a base and carries no merge records.
    """
    weights = init_weights(cfg, rng)
    model = ToyDiT(cfg, weights)
    params = dict(weights.tensors)
    optimizer = Adam(opt)
    for step in range(steps):
        x0 = dataset.sample(step % dataset.size)
        t = rng.uniform_range(t_range[0], t_range[1])
        eps = rng.gaussian(x0.shape)
        tape = Tape()
        xt = flowmatch.interpolate(x0, eps, t)
        v_pred = model.forward(xt, t, params=params, tape=tape)
        loss = flowmatch.fm_loss(v_pred, flowmatch.velocity_target(x0, eps), 1.0, tape)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(step)
        tape.backward(loss)
        grads = {name: tape.grad(p).numpy() for name, p in params.items()}
        params = optimizer.step(params, grads)
    return weights.with_tensors(params)


def build_base(cfg) -> Checkpoint:
    """Deterministic base checkpoint for a run config: seeded init plus
    the configured pretraining budget at native resolution."""
    model_cfg = cfg.model_config(attn_mode="dense")
    rng = Rng(cfg.seed, stream=STREAM_INIT)
    if cfg.pretrain_steps == 0:
        return init_weights(model_cfg, rng)
    data = SyntheticDataset(cfg.seed, cfg.low_res[0], cfg.low_res[1], cfg.train_samples)
    return pretrain_base(model_cfg, data, cfg.pretrain_steps, cfg.adam_config(), rng)


# ---------------------------------------------------------------------------
# two-resolution sampling
# ---------------------------------------------------------------------------


@dataclass
class CoarseToFineResult:
    low_res: Tensor
    upsampled: Tensor
    high_res: Tensor


def coarse_to_fine_sample(base: Checkpoint, lora2: Sequence[LoRAAdapter] | None,
                          prompt_seed: int, cfg) -> CoarseToFineResult:
    """Generate at native resolution, upsample, renoise, refine.

    Stage one samples the low grid from pure noise with the base model
    (dense attention, full step budget). The result is nearest-upsampled,
    renoised to the configured denoising strength s, and integrated back
    to t=0 by the adapter-composed model in windowed+coarse mode using
    round(s * steps) refinement steps. Strength 0 returns the upsampled
    grid untouched; strength 1 starts the refinement from pure noise.
    """
    low_cfg = cfg.model_config(attn_mode="dense", grid=cfg.low_res)
    low_model = ToyDiT(low_cfg, base)
    xT = Rng(prompt_seed, stream=STREAM_SAMPLE_LOW).gaussian(cfg.low_res)
    low = flowmatch.sample_ode(low_model.velocity_field(), xT,
                               steps=cfg.sampler_steps, method=cfg.sampler_method)

    if cfg.high_res[0] % cfg.low_res[0] or cfg.high_res[1] % cfg.low_res[1]:
        raise ContractError(f"high_res {cfg.high_res} must be an integer multiple of low_res {cfg.low_res}")
    fy = cfg.high_res[0] // cfg.low_res[0]
    fx = cfg.high_res[1] // cfg.low_res[1]
    if fy != fx:
        raise ContractError(f"anisotropic upsample factors ({fy}, {fx}) are not supported")
    up = ops.nearest_upsample2d(low, fy)

    s = float(cfg.denoising_strength)
    if not 0.0 <= s <= 1.0:
        raise ContractError(f"denoising strength must lie in [0, 1], got {s}")
    if s == 0.0:
        return CoarseToFineResult(low_res=low, upsampled=up, high_res=up)

    eps = Rng(prompt_seed, stream=STREAM_SAMPLE_REFINE).gaussian(cfg.high_res)
    x_s = flowmatch.interpolate(up, eps, s)
    weights = compose_inference(base, list(lora2)) if lora2 else base
    hi_cfg = cfg.model_config(attn_mode="gclfa", grid=cfg.high_res)
    hi_model = ToyDiT(hi_cfg, weights)
    refine_steps = max(1, round(cfg.sampler_steps * s))
    high = flowmatch.integrate(hi_model.velocity_field(), x_s, s,
                               refine_steps, method=cfg.sampler_method)
    return CoarseToFineResult(low_res=low, upsampled=up, high_res=high)


def reconstruction_errors(model: ToyDiT, dataset: SyntheticDataset, indices: Sequence[int],
                          deg_cfg: hfato.DegradationConfig, t: float, rng: Rng,
                          variant: str = "interpolated") -> list[float]:
    """Per-sample degradation-reconstruction error at a fixed timestep.

    Used for paired model comparisons: call once per model with fresh rng
    instances on the same stream so both see identical noise draws.
    """
    errs = []
    for idx in indices:
        x0 = dataset.sample(idx)
        eps = rng.gaussian(x0.shape)
        batch = hfato.hfato_forward(x0, eps, t, deg_cfg, variant)
        v_pred = model.forward(batch.xt, t)
        x0_hat = hfato.reconstruct_x0(batch.xt, v_pred, t)
        errs.append(hfato.hfato_loss(x0_hat, x0).item())
    return errs
