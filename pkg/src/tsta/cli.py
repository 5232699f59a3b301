"""Command-line entry point: ``tsta {mask,bench,train,sample,metrics}``.

Configuration comes from JSON files with a few override flags. Exit codes:
0 success, 1 validation error, 2 correctness-gate failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ._backend import default_threads, set_threads
from .bench import BenchConfig, default_bench_config, emit_report, run_attention_bench
from .diffusion import make_noise_schedule, rescaled_noise_schedule, sample
from .errors import CorrectnessGateError, TSTAError, ValidationError
from .grid import GridSpec
from .io import atomic_write_bytes, atomic_write_text, dump_json, read_latent, write_latent
from .mask import (
    WindowSchedule,
    build_cross_modal_mask,
    build_sliding_tile_mask,
    render_ascii,
    serialize_mask,
)
from .metrics import format_metric, psnr, ssim
from .model import (
    DenoiserConfig,
    desk_config,
    freeze_schedule,
    init_model,
    label_condition,
    load_checkpoint,
    make_synthetic_dataset,
    save_checkpoint,
    train,
    train_log_csv,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_GATE = 2
EXIT_IO = 3

log = logging.getLogger("tsta")

DEFAULT_TRAIN = {
    "steps": 500,
    "lr": 1e-3,
    "lr_half_width": 1e-2,
    "batch_size": 4,
    "cond_dropout": 0.1,
    "log_every": 10,
    "beta_start": 1e-4,
    "beta_end": 2e-2,
    # scale the endpoints from a 1000-step reference to the configured T
    "rescale_betas": True,
}
DEFAULT_DATA = {"n_labels": 4, "n_per_label": 8, "noise": 0.05}


def _load_config(path):
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from exc


def _noise_schedule(n_steps, settings):
    if settings.get("rescale_betas", True):
        return rescaled_noise_schedule(n_steps, settings["beta_start"], settings["beta_end"])
    return make_noise_schedule(n_steps, settings["beta_start"], settings["beta_end"])


# -- mask -------------------------------------------------------------------


def cmd_mask(args) -> int:
    cfg = _load_config(args.config)
    grid = GridSpec.from_dict(cfg["grid"]) if "grid" in cfg else GridSpec(4, 4, 4, 1, 1, 1)
    window = cfg.get("window", [3, 3, 3])
    n_text = int(cfg.get("n_text_tokens", 0))
    video = build_sliding_tile_mask(grid, window)
    mask = build_cross_modal_mask(video, n_text)
    counts = video.row_counts()
    out = Path(args.out or "mask.bin")
    atomic_write_bytes(out, serialize_mask(mask))
    print(f"blocks: {mask.n_query_blocks}x{mask.n_key_blocks}")
    print(f"density: {mask.density!r}")
    print(f"video_density: {video.density!r}")
    print(f"row_admitted: min={int(counts.min())} max={int(counts.max())}")
    print(f"written: {out}")
    if args.ascii:
        print(render_ascii(mask))
    return EXIT_OK


# -- bench ------------------------------------------------------------------


def cmd_bench(args) -> int:
    cfg = {**default_bench_config().to_dict(), **_load_config(args.config)}
    if args.reps is not None:
        cfg["repetitions"] = args.reps
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    config = BenchConfig.from_dict(cfg)
    report = run_attention_bench(config)
    out_dir = Path(args.out or "bench_out")
    csv_path, json_path = emit_report(report, out_dir / "report.csv")
    for c in report.cases:
        print(
            f"{c.case_id} seq={c.seq_len} density={c.density:.4f} flop_ratio={c.flop_ratio:.4f} "
            f"dense={c.dense_ms:.2f}ms sparse={c.sparse_ms:.2f}ms speedup={c.speedup:.2f}x"
        )
    print(f"written: {csv_path} {json_path}")
    return EXIT_OK


# -- train ------------------------------------------------------------------


def _train_settings(cfg: dict, args):
    model_cfg = cfg.get("model")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    if model_cfg is None:
        config = desk_config(seed=seed)
    else:
        model_cfg = dict(model_cfg)
        model_cfg["seed"] = seed
        if "schedule" not in model_cfg:
            model_cfg["schedule"] = {
                "windows": model_cfg.pop("windows", [[3, 3, 3]]),
                "n_steps": model_cfg.pop("n_steps", 50),
            }
        config = DenoiserConfig.from_dict(model_cfg)
    tr = {**DEFAULT_TRAIN, **cfg.get("train", {})}
    if args.steps is not None:
        tr["steps"] = args.steps
    data = {**DEFAULT_DATA, **cfg.get("data", {})}
    return config, tr, data, seed


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    config, tr, data, seed = _train_settings(cfg, args)
    if tr["steps"] < 0:
        raise ValidationError("steps must be >= 0")
    model = init_model(config)
    dataset = make_synthetic_dataset(
        seed,
        data["n_labels"],
        data["n_per_label"],
        config.grid,
        config.channels,
        config.d_cond,
        noise=data["noise"],
    )
    noise_sched = _noise_schedule(config.n_steps, tr)
    state = train(
        model,
        dataset,
        noise_sched,
        tr["steps"],
        lr=tr["lr"],
        tau_plan=(config.tau_start, config.tau_end),
        lr_half_width=tr["lr_half_width"],
        batch_size=tr["batch_size"],
        cond_dropout=tr["cond_dropout"],
        seed=seed,
        log_every=tr["log_every"],
    )
    frozen = freeze_schedule(state)
    out_dir = Path(args.out or "train_out")
    extra = {
        "data": {**data, "seed": seed},
        "noise_schedule": {
            "n_steps": config.n_steps,
            "beta_start": tr["beta_start"],
            "beta_end": tr["beta_end"],
            "rescale_betas": tr["rescale_betas"],
        },
        "frozen_schedule": frozen.to_dict(),
    }
    ckpt = save_checkpoint(model, out_dir / "checkpoint.json", state.step, state.tau, extra)
    atomic_write_text(out_dir / "train_log.csv", train_log_csv(state))
    if state.losses:
        print(f"loss first={state.losses[0]:.5f} last={state.losses[-1]:.5f}")
    print(f"frozen windows: {[list(w) for w in frozen.windows]}")
    print(f"written: {ckpt} {out_dir / 'train_log.csv'}")
    return EXIT_OK


# -- sample -----------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = _load_config(args.config)
    ckpt_path = args.checkpoint or cfg.get("checkpoint")
    if ckpt_path is None:
        raise ValidationError("sample needs --checkpoint (or 'checkpoint' in the config)")
    model, manifest = load_checkpoint(ckpt_path)
    extra = manifest.get("extra", {})
    if "frozen_schedule" in extra:
        model = model.with_schedule(WindowSchedule.from_dict(extra["frozen_schedule"]))
    ns = {**DEFAULT_TRAIN, **extra.get("noise_schedule", {})}
    noise_sched = _noise_schedule(model.config.n_steps, ns)
    label = args.label if args.label is not None else int(cfg.get("label", 0))
    data_seed = extra.get("data", {}).get("seed", model.config.seed)
    cond = label_condition(label, model.config.d_cond, data_seed)
    cfg_scale = None if args.cond_only else (args.cfg if args.cfg is not None else float(cfg.get("cfg_scale", 5.0)))
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    clip = args.clip_x0 if args.clip_x0 is not None else cfg.get("clip_x0")
    z = sample(model, cond, noise_sched, cfg_scale, seed, model.config.latent_shape, clip_x0=clip)
    out = Path(args.out or "sample.f32")
    write_latent(out, z, {"label": label, "cfg_scale": cfg_scale, "seed": seed, "clip_x0": clip})
    print(f"written: {out}")
    reference = args.reference or cfg.get("reference")
    if reference:
        ref = read_latent(reference)
        zq = read_latent(out)
        max_val = float(ref.max() - ref.min()) or 1.0
        print(json.dumps({"psnr": format_metric(psnr(zq, ref, max_val)), "ssim": ssim(zq, ref, max_val=max_val)}))
    return EXIT_OK


# -- metrics ----------------------------------------------------------------


def cmd_metrics(args) -> int:
    a = read_latent(args.a)
    b = read_latent(args.b)
    max_val = args.max_val if args.max_val is not None else (float(b.max() - b.min()) or 1.0)
    result = {
        "psnr": format_metric(psnr(a, b, max_val)),
        "ssim": ssim(a, b, window=args.window, max_val=max_val),
        "max_val": max_val,
    }
    text = json.dumps(result, sort_keys=True)
    print(text)
    if args.out:
        atomic_write_text(args.out, dump_json(result))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tsta", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output path (file or directory, per subcommand)")
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--threads", type=int, default=None, help="thread budget (env TSTA_THREADS)")

    p = sub.add_parser("mask", help="build a sliding-tile block mask")
    common(p)
    p.add_argument("--ascii", action="store_true", help="print the block matrix as text")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("bench", help="dense vs sparse attention latency")
    common(p)
    p.add_argument("--reps", type=int, default=None, help="timed repetitions (>= 3)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train the toy denoiser on synthetic clips")
    common(p)
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="sample a latent clip from a checkpoint")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--label", type=int, default=None)
    p.add_argument("--cfg", type=float, default=None, help="guidance scale (default 5.0)")
    p.add_argument("--cond-only", action="store_true", help="conditional branch only, no guidance")
    p.add_argument("--clip-x0", type=float, default=None, help="clip the implied clean latent each step")
    p.add_argument("--reference", help="latent dump to score the sample against")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("metrics", help="PSNR/SSIM between two latent dumps")
    common(p)
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--max-val", type=float, default=None)
    p.add_argument("--window", type=int, default=8)
    p.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(message)s")
    threads = args.threads if args.threads is not None else default_threads()
    limiter = set_threads(threads) if args.command != "bench" else None
    try:
        return args.func(args)
    except CorrectnessGateError as exc:
        print(f"error: CorrectnessGateError: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (TSTAError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
