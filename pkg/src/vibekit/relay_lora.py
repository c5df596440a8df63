"""Low-rank adapter algebra and the two-stage relay fine-tuning protocol.

An adapter contributes delta = (alpha / rank) * B @ A to one named base
weight. Stage 1 trains adapters against the frozen base at low
resolution and merges them in; stage 2 trains a second adapter set on
top of the merged (and re-frozen) weights at high resolution. Inference
composes only the stage-2 adapters onto the *original* base: composing
onto weights that already absorbed a merge is the protocol violation
this module guards against.

Merge/strip invertibility: floating-point addition cannot be undone
exactly by subtraction ((w + d) - d generally differs from w in the last
bit, and two distinct bases can even round to the same merged tensor).
To still give strip() an exact inverse, an in-memory merge retains the
pre-merge tensors alongside a fingerprint of each applied delta; strip
restores the retained tensor when it is asked to remove the identical
delta, and falls back to numeric subtraction otherwise. The retained
tensors are never serialized, so a checkpoint staged through a 32-bit
file strips numerically, within the documented 1e-6 relative tolerance.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint
from .errors import CheckpointError, ContractError, RelayViolationError, ShapeError
from .rng import Rng
from .tensor import Tensor

_MERGED_KEY = "merged_adapters"
_STAGE_KEY = "stage"
_UNDO_ATTR = "_premerge"


def _fingerprint(t: Tensor) -> bytes:
    h = hashlib.sha256(repr(t.shape).encode())
    h.update(t.numpy().tobytes())
    return h.digest()


def _undo_map(ckpt: Checkpoint) -> dict[str, tuple[bytes, Tensor]]:
    return getattr(ckpt, _UNDO_ATTR, {})


@dataclass(frozen=True)
class LoRAAdapter:
    """Rank-r factor pair attached to the tensor named ``target_name``.

    A is (r, d_in), B is (d_out, r); a freshly initialized adapter has
    B = 0 and therefore a zero delta.
    """

    target_name: str
    a: Tensor
    b: Tensor
    rank: int
    alpha: float

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2:
            raise ShapeError("adapter factors must be rank-2")
        r, d_in = self.a.shape
        d_out, r2 = self.b.shape
        if r != self.rank or r2 != self.rank:
            raise ShapeError(f"factor shapes {self.a.shape}/{self.b.shape} disagree with rank {self.rank}")
        if self.rank < 1 or self.rank > min(d_in, d_out):
            raise ContractError(f"rank {self.rank} must lie in [1, min({d_in}, {d_out})]")
        if not self.alpha > 0:
            raise ContractError(f"alpha must be positive, got {self.alpha}")


def init_adapter(target_name: str, d_out: int, d_in: int, rank: int, alpha: float, rng: Rng) -> LoRAAdapter:
    """A ~ N(0, 1/rank), B = 0: the adapter starts as an exact no-op."""
    a = Tensor._wrap(rng.gaussian_array((rank, d_in)) / np.sqrt(rank))
    b = Tensor._wrap(np.zeros((d_out, rank)))
    return LoRAAdapter(target_name, a, b, rank, float(alpha))


def delta(adapter: LoRAAdapter) -> Tensor:
    """(alpha / rank) * B @ A."""
    return Tensor._wrap((adapter.alpha / adapter.rank) * (adapter.b.numpy() @ adapter.a.numpy()))


def _check_targets(base: Checkpoint, adapters: Sequence[LoRAAdapter]) -> None:
    for ad in adapters:
        if ad.target_name not in base.tensors:
            raise CheckpointError(f"adapter target {ad.target_name!r} not present in checkpoint")
        d = delta(ad)
        if d.shape != base.get(ad.target_name).shape:
            raise ShapeError(
                f"adapter delta shape {d.shape} does not match target "
                f"{ad.target_name!r} shape {base.get(ad.target_name).shape}")


def _merged_list(meta: dict[str, str]) -> list[str]:
    raw = meta.get(_MERGED_KEY, "")
    return [x for x in raw.split(",") if x]


def merge(base: Checkpoint, adapters: Sequence[LoRAAdapter], stage: str | None = None) -> Checkpoint:
    """W + delta per targeted tensor; everything else is carried over
    untouched. Metadata records which targets were merged, and the
    pre-merge tensors are retained in memory so strip() can invert the
    merge exactly (see module docstring)."""
    _check_targets(base, adapters)
    updates = {}
    undo = dict(_undo_map(base))
    for ad in adapters:
        d = delta(ad)
        undo[ad.target_name] = (_fingerprint(d), base.get(ad.target_name))
        updates[ad.target_name] = Tensor._wrap(base.get(ad.target_name).numpy() + d.numpy())
    meta = dict(base.metadata)
    if adapters:
        merged = _merged_list(meta) + [ad.target_name for ad in adapters]
        meta[_MERGED_KEY] = ",".join(merged)
        meta["lora_rank"] = str(adapters[0].rank)
        meta["lora_alpha"] = repr(float(adapters[0].alpha))
    if stage is not None:
        meta[_STAGE_KEY] = stage
    out = base.with_tensors(updates, meta)
    object.__setattr__(out, _UNDO_ATTR, undo)
    return out


def strip(merged: Checkpoint, adapters: Sequence[LoRAAdapter], stage: str | None = None) -> Checkpoint:
    """Exact inverse of an in-memory merge.

    If the checkpoint retains the pre-merge tensor for a target and the
    adapter reproduces the recorded delta, the original tensor is restored
    bit-for-bit; otherwise (for example after a file round trip) the delta
    is subtracted numerically. Merge records in the metadata are removed
    again, so a merge/strip round trip restores metadata too.
    """
    _check_targets(merged, adapters)
    undo = dict(_undo_map(merged))
    updates = {}
    for ad in adapters:
        d = delta(ad)
        record = undo.get(ad.target_name)
        if record is not None and record[0] == _fingerprint(d):
            updates[ad.target_name] = record[1]
            del undo[ad.target_name]
        else:
            updates[ad.target_name] = Tensor._wrap(merged.get(ad.target_name).numpy() - d.numpy())
    meta = dict(merged.metadata)
    if adapters:
        remaining = _merged_list(meta)
        for ad in adapters:
            if ad.target_name in remaining:
                remaining.remove(ad.target_name)
        if remaining:
            meta[_MERGED_KEY] = ",".join(remaining)
        else:
            meta.pop(_MERGED_KEY, None)
            meta.pop("lora_rank", None)
            meta.pop("lora_alpha", None)
    if stage is not None:
        meta[_STAGE_KEY] = stage
    out = merged.with_tensors(updates, meta)
    object.__setattr__(out, _UNDO_ATTR, undo)
    return out


def compose_inference(base: Checkpoint, lora2: Sequence[LoRAAdapter]) -> Checkpoint:
    """Same arithmetic as merge, tagged stage="inference".

    Refuses to run on a checkpoint that already contains merged adapters:
    the relay protocol composes the stage-2 set onto the original base,
    never onto the stage-1-merged weights.
    """
    if _merged_list(base.metadata):
        raise RelayViolationError(
            "relay violation: base checkpoint already has merged adapters "
            f"({base.metadata.get(_MERGED_KEY)}); compose onto the original base weights")
    out = merge(base, lora2, stage="inference")
    return out


# ---------------------------------------------------------------------------
# adapter (de)serialization
# ---------------------------------------------------------------------------


def adapters_to_checkpoint(adapters: Sequence[LoRAAdapter], stage: str) -> Checkpoint:
    tensors: dict[str, Tensor] = {}
    for ad in adapters:
        tensors[f"{ad.target_name}.lora_A"] = ad.a
        tensors[f"{ad.target_name}.lora_B"] = ad.b
    meta = {_STAGE_KEY: stage}
    if adapters:
        meta["lora_rank"] = str(adapters[0].rank)
        meta["lora_alpha"] = repr(float(adapters[0].alpha))
    return Checkpoint(tensors, meta)


def adapters_from_checkpoint(ckpt: Checkpoint) -> list[LoRAAdapter]:
    try:
        rank = int(ckpt.metadata["lora_rank"])
        alpha = float(ckpt.metadata["lora_alpha"])
    except KeyError as e:
        raise CheckpointError(f"adapter checkpoint missing metadata key {e}") from None
    adapters = []
    for name in ckpt.names():
        if not name.endswith(".lora_A"):
            continue
        target = name[:-len(".lora_A")]
        b_name = f"{target}.lora_B"
        if b_name not in ckpt.tensors:
            raise CheckpointError(f"adapter checkpoint has {name!r} without {b_name!r}")
        adapters.append(LoRAAdapter(target, ckpt.get(name), ckpt.get(b_name), rank, alpha))
    if not adapters:
        raise CheckpointError("checkpoint contains no adapter factor pairs")
    return adapters


# ---------------------------------------------------------------------------
# the two-stage protocol
# ---------------------------------------------------------------------------


@dataclass
class RelayResult:
    base: Checkpoint
    lora1: Checkpoint
    lora2: Checkpoint
    merged: Checkpoint
    logs: dict[str, list[float]] = field(default_factory=dict)


def relay_protocol(cfg) -> RelayResult:
    """Run both adaptation stages end to end on synthetic data.

    Stage 1 trains adapters at low resolution with the plain velocity
    regression loss against the frozen base; the result is merged and
    frozen. Stage 2 trains a fresh adapter set at high resolution on top
    of the merged weights, with windowed+coarse attention and the
    degradation-reconstruction objective active. Only the stage-2 set is
    exported for inference.

    ``cfg`` is a RunConfig; training itself is delegated to the model
    module.
    """
    from . import toydit

    base = toydit.build_base(cfg)

    model1 = toydit.ToyDiT(cfg.model_config(attn_mode="dense"), base)
    data1 = toydit.SyntheticDataset(cfg.seed, cfg.low_res[0], cfg.low_res[1], cfg.train_samples)
    res1 = toydit.train(
        model1, data1, objective="fm", lora_targets=cfg.lora_targets,
        steps=cfg.steps_stage1, opt=cfg.adam_config(), rng=Rng(cfg.seed, stream=toydit.STREAM_STAGE1),
        rank=cfg.lora_rank, alpha=cfg.lora_alpha, fm_weight=cfg.fm_weight,
    )
    merged = merge(base, res1.adapters, stage="stage1_merged")

    model2 = toydit.ToyDiT(cfg.model_config(attn_mode="gclfa", grid=cfg.high_res), merged)
    data2 = toydit.SyntheticDataset(cfg.seed, cfg.high_res[0], cfg.high_res[1], cfg.train_samples)
    res2 = toydit.train(
        model2, data2, objective="hfato", lora_targets=cfg.lora_targets,
        steps=cfg.steps_stage2, opt=cfg.adam_config(), rng=Rng(cfg.seed, stream=toydit.STREAM_STAGE2),
        rank=cfg.lora_rank, alpha=cfg.lora_alpha, fm_weight=cfg.fm_weight,
        hfato_cfg=cfg.degradation_config(), hfato_variant=cfg.hfato_variant,
    )

    return RelayResult(
        base=base,
        lora1=adapters_to_checkpoint(res1.adapters, stage="stage1"),
        lora2=adapters_to_checkpoint(res2.adapters, stage="stage2"),
        merged=merged,
        logs={"stage1": res1.losses, "stage2": res2.losses},
    )
