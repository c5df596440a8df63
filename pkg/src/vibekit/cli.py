"""Command-line entry point and benchmark harness.

Every subcommand writes its artifacts under one output directory plus a
manifest.json recording the config hash, seed, library versions, and a
sha256 digest of each output file, so a run can be checked for exact
reproduction. Exit codes: 0 success, 2 usage error, 3 invalid
configuration, 4 missing input file, 5 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time

import numpy as np

from . import __version__, flowmatch, hfato, relay_lora, toydit
from .checkpoint import Checkpoint, load, read_header, save
from .config import RunConfig
from .errors import ConfigError, VibekitError
from .gclfa import CoarseSpec, MacCounter, TokenGrid, WindowSpec, gclfa_blocked, gclfa_reference, mask_stats
from .rng import Rng

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5

_EPILOG = """exit codes:
  0  success
  2  usage error (unknown subcommand or bad flags)
  3  invalid configuration (aggregated schema report on stderr)
  4  missing input file
  5  runtime failure (divergence, malformed checkpoint, ...)

environment:
  VIBEKIT_OUT  overrides the output directory; nothing else is read
"""

MASK_STATS_COLUMNS = ["grid_h", "grid_w", "win_h", "win_w", "s", "local_keys",
                      "coarse_keys", "flops_dense", "flops_sparse", "reduction"]
BENCH_COLUMNS = ["grid", "win", "s", "executor", "wall_time", "maccs", "max_abs_err_vs_oracle"]


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: str, subcommand: str, cfg: RunConfig | None, outputs: list[str]) -> str:
    manifest = {
        "subcommand": subcommand,
        "config_hash": cfg.config_hash() if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "versions": {
            "vibekit": __version__,
            "numpy": np.__version__,
            "python": ".".join(str(v) for v in sys.version_info[:3]),
        },
        "outputs": {os.path.basename(p): _sha256(p) for p in sorted(outputs)},
    }
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _write_csv(path: str, columns: list[str], rows: list[list]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(str(v) for v in row) + "\n")


def _resolve_out(args, cfg: RunConfig | None) -> str:
    out = os.environ.get("VIBEKIT_OUT") or getattr(args, "out", None) or (cfg.out_dir if cfg else "out")
    os.makedirs(out, exist_ok=True)
    return out


def _load_cfg(args) -> RunConfig:
    path = getattr(args, "config", None)
    if path is None:
        return RunConfig().validate()
    return RunConfig.from_json(path)


def _parse_pair(text: str, flag: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise ConfigError([f"{flag} expects AxB, got {text!r}"])
    try:
        return int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError([f"{flag} expects integers, got {text!r}"]) from None


# ---------------------------------------------------------------------------
# benchmark harness
# ---------------------------------------------------------------------------


def bench_attention(grid: tuple[int, int], win: WindowSpec, coarse: CoarseSpec, d: int = 16,
                    seed: int = 0, repeats: int = 3, threads: int = 1) -> list[dict]:
    """Time the dense reference against the blocked executor on one config.

    Returns two rows. The dense row reports the cost-model baseline count
    (full attention, 2*N^2*d) and a zero error since it *is* the oracle;
    the blocked row reports its instrumented multiply-accumulate count,
    which the tests require to equal the sparse formula exactly, and its
    max elementwise deviation from the dense output.
    """
    h_tok, w_tok = grid
    rng = Rng(seed, stream=901)
    q = TokenGrid(h_tok, w_tok, rng.gaussian((h_tok * w_tok, d)))
    k = TokenGrid(h_tok, w_tok, rng.gaussian((h_tok * w_tok, d)))
    v = TokenGrid(h_tok, w_tok, rng.gaussian((h_tok * w_tok, d)))
    stats = mask_stats((w_tok, h_tok), win, coarse, d=d)

    def best_time(fn):
        best = float("inf")
        result = None
        for _ in range(repeats):
            t0 = time.perf_counter()
            result = fn()
            best = min(best, time.perf_counter() - t0)
        return best, result

    dense_time, dense_out = best_time(lambda: gclfa_reference(q, k, v, win, coarse))
    counter = MacCounter()
    blocked_time, blocked_out = best_time(
        lambda: gclfa_blocked(q, k, v, win, coarse, counter=counter, threads=threads))
    counter_total = counter.total // repeats  # one call's worth
    err = float(np.max(np.abs(blocked_out.numpy() - dense_out.numpy())))

    label_grid = f"{h_tok}x{w_tok}"
    label_win = f"{win.h}x{win.w}"
    return [
        {"grid": label_grid, "win": label_win, "s": coarse.s if coarse.enabled else 0,
         "executor": "dense", "wall_time": dense_time, "maccs": stats.flops_dense,
         "max_abs_err_vs_oracle": 0.0},
        {"grid": label_grid, "win": label_win, "s": coarse.s if coarse.enabled else 0,
         "executor": "blocked", "wall_time": blocked_time, "maccs": counter_total,
         "max_abs_err_vs_oracle": err},
    ]


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def _cmd_train_stage1(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args, cfg)
    base = toydit.build_base(cfg)
    model = toydit.ToyDiT(cfg.model_config(attn_mode="dense"), base)
    data = toydit.SyntheticDataset(cfg.seed, cfg.low_res[0], cfg.low_res[1], cfg.train_samples)
    res = toydit.train(model, data, objective="fm", lora_targets=cfg.lora_targets,
                       steps=cfg.steps_stage1, opt=cfg.adam_config(),
                       rng=Rng(cfg.seed, stream=toydit.STREAM_STAGE1),
                       rank=cfg.lora_rank, alpha=cfg.lora_alpha, fm_weight=cfg.fm_weight,
                       t_range=(cfg.t_min, cfg.t_max))
    base_path = os.path.join(out, "base.vbcp")
    lora_path = os.path.join(out, "lora1.vbcp")
    csv_path = os.path.join(out, "stage1_loss.csv")
    save(base, base_path)
    save(relay_lora.adapters_to_checkpoint(res.adapters, stage="stage1"), lora_path)
    _write_csv(csv_path, ["step", "loss"], [[i, repr(l)] for i, l in enumerate(res.losses)])
    _write_manifest(out, "train-stage1", cfg, [base_path, lora_path, csv_path])
    print(f"stage1 done: {len(res.losses)} steps, final loss {res.losses[-1] if res.losses else float('nan')}")
    return EXIT_OK


def _cmd_train_stage2(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args, cfg)
    lora1 = relay_lora.adapters_from_checkpoint(load(args.lora1))
    base = toydit.build_base(cfg)
    merged = relay_lora.merge(base, lora1, stage="stage1_merged")
    model = toydit.ToyDiT(cfg.model_config(attn_mode="gclfa", grid=cfg.high_res), merged)
    data = toydit.SyntheticDataset(cfg.seed, cfg.high_res[0], cfg.high_res[1], cfg.train_samples)
    res = toydit.train(model, data, objective="hfato", lora_targets=cfg.lora_targets,
                       steps=cfg.steps_stage2, opt=cfg.adam_config(),
                       rng=Rng(cfg.seed, stream=toydit.STREAM_STAGE2),
                       rank=cfg.lora_rank, alpha=cfg.lora_alpha, fm_weight=cfg.fm_weight,
                       hfato_cfg=cfg.degradation_config(), hfato_variant=cfg.hfato_variant,
                       t_range=(cfg.t_min, cfg.t_max))
    lora_path = os.path.join(out, "lora2.vbcp")
    csv_path = os.path.join(out, "stage2_loss.csv")
    save(relay_lora.adapters_to_checkpoint(res.adapters, stage="stage2"), lora_path)
    _write_csv(csv_path, ["step", "loss"], [[i, repr(l)] for i, l in enumerate(res.losses)])
    _write_manifest(out, "train-stage2", cfg, [lora_path, csv_path])
    print(f"stage2 done: {len(res.losses)} steps, final loss {res.losses[-1] if res.losses else float('nan')}")
    return EXIT_OK


def _cmd_merge_like(args, kind: str) -> int:
    base = load(args.base)
    adapters = relay_lora.adapters_from_checkpoint(load(args.adapter))
    if kind == "merge":
        result = relay_lora.merge(base, adapters, stage="merged")
    elif kind == "strip":
        result = relay_lora.strip(base, adapters)
    else:
        result = relay_lora.compose_inference(base, adapters)
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    save(result, args.output)
    _write_manifest(out_dir, {"merge": "merge-lora", "strip": "strip-lora"}.get(kind, "compose"),
                    None, [args.output])
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args, cfg)
    base = load(args.ckpt) if args.ckpt else toydit.build_base(cfg)
    model = toydit.ToyDiT(cfg.model_config(attn_mode="dense"), base)
    xT = Rng(cfg.seed, stream=toydit.STREAM_SAMPLE_LOW).gaussian(cfg.low_res)
    sample = flowmatch.sample_ode(model.velocity_field(), xT, cfg.sampler_steps, cfg.sampler_method)
    path = os.path.join(out, "sample.vbcp")
    save(Checkpoint({"sample": sample}, {"stage": "sample", "seed": str(cfg.seed)}), path)
    _write_manifest(out, "sample", cfg, [path])
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_coarse_to_fine(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args, cfg)
    base = load(args.base) if args.base else toydit.build_base(cfg)
    lora2 = relay_lora.adapters_from_checkpoint(load(args.lora2)) if args.lora2 else None
    res = toydit.coarse_to_fine_sample(base, lora2, cfg.seed, cfg)
    path = os.path.join(out, "coarse_to_fine.vbcp")
    save(Checkpoint(
        {"low_res": res.low_res, "upsampled": res.upsampled, "high_res": res.high_res},
        {"stage": "coarse_to_fine", "seed": str(cfg.seed)},
    ), path)
    _write_manifest(out, "coarse-to-fine", cfg, [path])
    print(f"hf_energy upsampled={hfato.hf_energy(res.upsampled)!r} "
          f"high_res={hfato.hf_energy(res.high_res)!r}")
    print(f"wrote {path}")
    return EXIT_OK


def _cmd_mask_stats(args) -> int:
    grid_h, grid_w = _parse_pair(args.grid, "--grid")
    win_h, win_w = _parse_pair(args.win, "--win")
    win = WindowSpec(w=win_w, h=win_h)
    coarse = CoarseSpec(s=args.pool) if args.pool >= 1 else CoarseSpec(s=1, enabled=False)
    stats = mask_stats((grid_w, grid_h), win, coarse, d=args.dim)
    row = [grid_h, grid_w, win_h, win_w, coarse.s if coarse.enabled else 0,
           stats.local_keys, stats.coarse_keys, stats.flops_dense, stats.flops_sparse,
           repr(stats.reduction)]
    print(",".join(MASK_STATS_COLUMNS))
    print(",".join(str(v) for v in row))
    return EXIT_OK


def _cmd_bench_attn(args) -> int:
    cfg = _load_cfg(args)
    out = _resolve_out(args, cfg)
    win_h, win_w = _parse_pair(args.win, "--win")
    rows = []
    for token in args.grids.split(","):
        grid_h, grid_w = _parse_pair(token.strip(), "--grids")
        res = bench_attention((grid_h, grid_w), WindowSpec(w=win_w, h=win_h),
                              CoarseSpec(s=args.pool), d=args.dim, seed=cfg.seed,
                              repeats=args.repeats, threads=args.threads)
        rows.extend(res)
    csv_rows = [[r["grid"], r["win"], r["s"], r["executor"], repr(r["wall_time"]),
                 r["maccs"], repr(r["max_abs_err_vs_oracle"])] for r in rows]
    path = os.path.join(out, "bench_attn.csv")
    _write_csv(path, BENCH_COLUMNS, csv_rows)
    _write_manifest(out, "bench-attn", cfg, [path])
    print(",".join(BENCH_COLUMNS))
    for row in csv_rows:
        print(",".join(str(v) for v in row))
    return EXIT_OK


def _cmd_degrade(args) -> int:
    ckpt = load(args.input)
    cfg = hfato.DegradationConfig(factor=args.factor, up=args.up)
    tensors = {name: hfato.degrade(t, cfg) for name, t in ckpt.tensors.items()}
    meta = dict(ckpt.metadata)
    meta["degraded"] = f"factor={args.factor},up={args.up}"
    out_dir = os.path.dirname(os.path.abspath(args.output))
    os.makedirs(out_dir, exist_ok=True)
    save(Checkpoint(tensors, meta), args.output)
    _write_manifest(out_dir, "degrade", None, [args.output])
    print(f"wrote {args.output}")
    return EXIT_OK


def _cmd_hf_energy(args) -> int:
    ckpt = load(args.ckpt)
    print(repr(hfato.hf_energy(ckpt.get(args.tensor))))
    return EXIT_OK


def _cmd_inspect(args) -> int:
    print(read_header(args.ckpt))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vibekit", epilog=_EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Flow-matching toolkit: relay adapters, windowed+coarse attention, "
                    "degradation-aware training, and the coarse-to-fine sampler.")
    sub = parser.add_subparsers(dest="cmd", required=True)

    def add_cfg(p):
        p.add_argument("--config", help="JSON config path (defaults apply if omitted)")
        p.add_argument("--out", help="output directory (default from config; VIBEKIT_OUT overrides)")

    p = sub.add_parser("train-stage1", help="train the low-resolution alignment adapters")
    add_cfg(p)
    p = sub.add_parser("train-stage2", help="train the high-resolution adapters on merged weights")
    add_cfg(p)
    p.add_argument("--lora1", required=True, help="stage-1 adapter checkpoint (.vbcp)")

    p = sub.add_parser("merge-lora", help="merge adapters into a base checkpoint")
    p.add_argument("base")
    p.add_argument("adapter")
    p.add_argument("-o", "--output", required=True)
    p = sub.add_parser("strip-lora", help="subtract adapters from a merged checkpoint")
    p.add_argument("base")
    p.add_argument("adapter")
    p.add_argument("-o", "--output", required=True)
    p = sub.add_parser("compose", help="compose stage-2 adapters onto the original base for inference")
    p.add_argument("base")
    p.add_argument("adapter")
    p.add_argument("-o", "--output", required=True)

    p = sub.add_parser("sample", help="sample the native-resolution grid from pure noise")
    add_cfg(p)
    p.add_argument("--ckpt", help="model checkpoint (default: base built from config seed)")

    p = sub.add_parser("coarse-to-fine", help="native sample, upsample, renoise, refine")
    add_cfg(p)
    p.add_argument("--base", help="base checkpoint (default: built from config seed)")
    p.add_argument("--lora2", help="stage-2 adapter checkpoint to compose for refinement")

    p = sub.add_parser("mask-stats", help="print the attention cost model as CSV")
    p.add_argument("--grid", required=True, help="grid extents HxW, e.g. 8x8")
    p.add_argument("--win", required=True, help="window extents HxW, e.g. 4x4")
    p.add_argument("--pool", type=int, default=2, help="coarse pool ratio (0 disables the branch)")
    p.add_argument("--dim", type=int, default=16, help="embedding dim used in the MAC counts")

    p = sub.add_parser("bench-attn", help="time dense reference vs blocked executor")
    add_cfg(p)
    p.add_argument("--grids", default="8x8,16x16,32x32,64x64", help="comma-separated HxW list")
    p.add_argument("--win", default="16x16", help="window extents HxW")
    p.add_argument("--pool", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("degrade", help="apply the downsample-upsample operator to every tensor")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--factor", type=int, default=2)
    p.add_argument("--up", choices=("nearest", "bilinear"), default="nearest")

    p = sub.add_parser("hf-energy", help="print the Laplacian energy of one stored tensor")
    p.add_argument("ckpt")
    p.add_argument("--tensor", required=True)

    p = sub.add_parser("inspect", help="print a checkpoint's raw header JSON")
    p.add_argument("ckpt")
    return parser


_DISPATCH = {
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "merge-lora": lambda a: _cmd_merge_like(a, "merge"),
    "strip-lora": lambda a: _cmd_merge_like(a, "strip"),
    "compose": lambda a: _cmd_merge_like(a, "compose"),
    "sample": _cmd_sample,
    "coarse-to-fine": _cmd_coarse_to_fine,
    "mask-stats": _cmd_mask_stats,
    "bench-attn": _cmd_bench_attn,
    "degrade": _cmd_degrade,
    "hf-energy": _cmd_hf_energy,
    "inspect": _cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _DISPATCH[args.cmd](args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_MISSING
    except VibekitError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
