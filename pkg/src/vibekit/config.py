"""Run configuration: one JSON schema shared by every CLI subcommand.

Validation is aggregated: a bad config reports every violation at once
instead of dying on the first. The only environment override is
VIBEKIT_OUT for the output directory; nothing else reads the
environment, so the (config, seed) pair fully determines a run.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError
from .gclfa import CoarseSpec, RoPEParams, WindowSpec
from .hfato import DegradationConfig
from .toydit import LORA_TARGET_MODULES, AdamConfig, ToyDiTConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # token grid extents, (h_tok, w_tok)
    low_res: tuple[int, int] = (8, 8)
    high_res: tuple[int, int] = (16, 16)
    # model
    d: int = 16
    n_layers: int = 2
    n_heads: int = 1
    d_ff: int = 32
    # stage-2 attention
    window: tuple[int, int] = (8, 8)  # (w, h)
    pool_ratio: int = 2
    rope_base: float = 10000.0
    # degradation objective
    hfato_factor: int = 2
    hfato_up: str = "nearest"
    hfato_variant: str = "interpolated"
    # adapters
    lora_rank: int = 8
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = LORA_TARGET_MODULES
    # optimizer (toy preset; 1e-4 is the conventional full-scale setting)
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # training
    pretrain_steps: int = 300
    steps_stage1: int = 400
    steps_stage2: int = 600
    train_samples: int = 32
    fm_weight: str = "unit"
    t_min: float = 0.02
    t_max: float = 0.98
    # sampling
    sampler_method: str = "euler"
    sampler_steps: int = 50
    denoising_strength: float = 0.7
    # recorded for config parity with text-conditioned setups; inert here
    guidance_scale: float = 5.0
    out_dir: str = "out"

    # -- derived module configs ------------------------------------------

    def model_config(self, attn_mode: str = "dense", grid: tuple[int, int] | None = None) -> ToyDiTConfig:
        grid = tuple(grid) if grid is not None else tuple(self.low_res)
        window = WindowSpec(w=self.window[0], h=self.window[1]) if attn_mode == "gclfa" else None
        coarse = CoarseSpec(s=self.pool_ratio) if attn_mode == "gclfa" else None
        return ToyDiTConfig(grid=grid, d=self.d, n_layers=self.n_layers, n_heads=self.n_heads,
                            d_ff=self.d_ff, attn_mode=attn_mode, window=window, coarse=coarse,
                            rope=RoPEParams(base=self.rope_base))

    def adam_config(self) -> AdamConfig:
        return AdamConfig(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps)

    def degradation_config(self) -> DegradationConfig:
        return DegradationConfig(factor=self.hfato_factor, up=self.hfato_up)

    # -- validation --------------------------------------------------------

    def problems(self) -> list[str]:
        p: list[str] = []
        if self.seed < 0 or self.seed > (1 << 64) - 1:
            p.append(f"seed must be an unsigned 64-bit integer, got {self.seed}")
        for label, res in (("low_res", self.low_res), ("high_res", self.high_res)):
            if len(res) != 2 or any(int(x) < 1 for x in res):
                p.append(f"{label} must be two positive extents, got {res}")
        if self.d < 4 or self.d % 4:
            p.append(f"d must be a positive multiple of 4, got {self.d}")
        elif self.n_heads < 1 or self.d % self.n_heads or (self.d // self.n_heads) % 4:
            p.append(f"n_heads={self.n_heads} must divide d={self.d} with head dim a multiple of 4")
        if self.n_layers < 1:
            p.append(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_ff < 1:
            p.append(f"d_ff must be >= 1, got {self.d_ff}")
        w, h = self.window
        if w < 2 or w % 2 or h < 2 or h % 2:
            p.append(f"window extents must be positive even integers, got {self.window}")
        elif not (w < self.high_res[1] and h < self.high_res[0]):
            p.append(f"window {self.window} must be smaller than the high-res grid {self.high_res}")
        if self.pool_ratio < 1:
            p.append(f"pool_ratio must be >= 1, got {self.pool_ratio}")
        elif self.high_res[0] % self.pool_ratio or self.high_res[1] % self.pool_ratio:
            p.append(f"high_res {self.high_res} not divisible by pool_ratio {self.pool_ratio}")
        if self.hfato_factor < 1:
            p.append(f"hfato_factor must be >= 1, got {self.hfato_factor}")
        else:
            for label, res in (("low_res", self.low_res), ("high_res", self.high_res)):
                if res[0] % self.hfato_factor or res[1] % self.hfato_factor:
                    p.append(f"{label} {res} not divisible by hfato_factor {self.hfato_factor}")
        if self.hfato_up not in ("nearest", "bilinear"):
            p.append(f"hfato_up must be 'nearest' or 'bilinear', got {self.hfato_up!r}")
        if self.hfato_variant not in ("interpolated", "literal_additive"):
            p.append(f"hfato_variant must be 'interpolated' or 'literal_additive', got {self.hfato_variant!r}")
        if not self.lora_targets:
            p.append("lora_targets must not be empty")
        else:
            bad = [t for t in self.lora_targets if t not in LORA_TARGET_MODULES]
            if bad:
                p.append(f"unknown lora targets {bad}; choose from {list(LORA_TARGET_MODULES)}")
        max_rank = min(self.d, self.d_ff) if "ffn.0" in self.lora_targets or "ffn.2" in self.lora_targets else self.d
        if self.lora_rank < 1 or self.lora_rank > max_rank:
            p.append(f"lora_rank must lie in [1, {max_rank}] for these dims, got {self.lora_rank}")
        if not self.lora_alpha > 0:
            p.append(f"lora_alpha must be positive, got {self.lora_alpha}")
        if not self.lr > 0:
            p.append(f"lr must be positive, got {self.lr}")
        for label, b in (("beta1", self.beta1), ("beta2", self.beta2)):
            if not 0.0 <= b < 1.0:
                p.append(f"{label} must lie in [0, 1), got {b}")
        if not self.adam_eps > 0:
            p.append(f"adam_eps must be positive, got {self.adam_eps}")
        for label, s in (("pretrain_steps", self.pretrain_steps),
                         ("steps_stage1", self.steps_stage1), ("steps_stage2", self.steps_stage2)):
            if s < 0:
                p.append(f"{label} must be >= 0, got {s}")
        if self.train_samples < 1:
            p.append(f"train_samples must be >= 1, got {self.train_samples}")
        if self.fm_weight not in ("unit", "sigma_sq"):
            p.append(f"fm_weight must be 'unit' or 'sigma_sq', got {self.fm_weight!r}")
        if not (0.0 < self.t_min < self.t_max <= 1.0):
            p.append(f"need 0 < t_min < t_max <= 1, got ({self.t_min}, {self.t_max})")
        if self.sampler_method not in ("euler", "heun"):
            p.append(f"sampler_method must be 'euler' or 'heun', got {self.sampler_method!r}")
        if self.sampler_steps < 1:
            p.append(f"sampler_steps must be >= 1, got {self.sampler_steps}")
        if not 0.0 <= self.denoising_strength <= 1.0:
            p.append(f"denoising_strength must lie in [0, 1], got {self.denoising_strength}")
        return p

    def validate(self) -> "RunConfig":
        probs = self.problems()
        if probs:
            raise ConfigError(probs)
        return self

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["low_res"] = list(self.low_res)
        d["high_res"] = list(self.high_res)
        d["window"] = list(self.window)
        d["lora_targets"] = list(self.lora_targets)
        return d

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        defaults = cls()
        known = set(defaults.__dataclass_fields__)
        problems = [f"unknown config key {k!r}" for k in raw if k not in known]
        kwargs = {}
        for key, value in raw.items():
            if key not in known:
                continue
            if key in ("low_res", "high_res", "window"):
                try:
                    value = tuple(int(x) for x in value)
                except (TypeError, ValueError):
                    problems.append(f"{key} must be a pair of integers, got {value!r}")
                    continue
            if key == "lora_targets":
                if not isinstance(value, (list, tuple)):
                    problems.append(f"lora_targets must be a list, got {value!r}")
                    continue
                value = tuple(str(t) for t in value)
            kwargs[key] = value
        if problems:
            raise ConfigError(problems)
        try:
            cfg = replace(defaults, **kwargs)
        except TypeError as e:
            raise ConfigError([str(e)]) from None
        return cfg.validate()

    @classmethod
    def from_json(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise
        except (json.JSONDecodeError, UnicodeDecodeError) as e:
            raise ConfigError([f"config file is not valid UTF-8 JSON: {e}"]) from None
        if not isinstance(raw, dict):
            raise ConfigError(["config root must be a JSON object"])
        return cls.from_dict(raw)
