"""Command-line entry point: ``sr3plus <command> [options]``.

Exit codes: 0 success, 2 user or input error, 3 numerical divergence.
Set SR3PLUS_THREADS to pin the torch thread count.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .config import ARMS, RunConfig, experiment_config, merge
from .core import InvalidArgument, Prng, TensorFormatError, read_image, write_image
from .data import (
    EmptyCorpusError,
    build_eval_set,
    build_training_set,
    get_profile,
    ingest,
    load_eval_set,
    save_eval_set,
    write_synthetic_corpus,
)
from .degrade import DegradationTrace, DegradeConfig, apply_trace, degrade, resize_array
from .denoiser import CheckpointError, DenoiserAdapter, load_checkpoint, save_checkpoint, smooth
from .diffusion import (
    DiffusionStepPlan,
    SamplingDiverged,
    TrainingDiverged,
    ancestral_sample,
    noise_augment,
)
from .experiments import (
    ablation_orderings,
    evaluate_model,
    parse_grid,
    run_ablation,
    run_sweep,
    sweep_ordering,
    train_run,
)
from .plotting import plot_ablation, plot_loss, plot_sweep, save_grid

log = logging.getLogger("sr3plus")

EXIT_OK, EXIT_USER, EXIT_DIVERGED = 0, 2, 3
REPORT_FIELDS = ["t_eval", "psnr_mean", "ssim_mean", "frechet", "n_pairs", "config_hash"]


def _write_json(path, obj):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _write_csv(path, fields, rows):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_run_config(args) -> RunConfig:
    """Config file (or the experiment default), then --set overrides, then flags."""
    base = RunConfig.load(args.config).to_dict() if args.config else experiment_config().to_dict()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidArgument(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = RunConfig.from_dict(merge(base, overrides))
    if getattr(args, "arm", None):
        cfg = cfg.with_arm(args.arm)
    return cfg


def _load_model(path):
    model, _, meta, _ = load_checkpoint(path)
    run = meta.get("run_config")
    cfg = RunConfig.from_dict(run) if run else replace(RunConfig(), unet=model.cfg)
    return model, cfg


# --- commands ------------------------------------------------------------------


def cmd_synth(args):
    paths = write_synthetic_corpus(args.output, args.count, args.size, args.seed, args.format)
    print(f"wrote {len(paths)} images to {args.output}")


def cmd_ingest(args):
    m = ingest(args.input, args.profile, args.split, args.lr_input)
    Path(args.output).write_text(m.to_json() + "\n")
    print(f"{len(m.entries)} entries, {m.skipped} skipped, {len(m.errors)} errors -> {args.output}")


def cmd_degrade(args):
    manifest = ingest(args.input, args.profile)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    replay = None
    if args.trace_in:
        replay = json.loads(Path(args.trace_in).read_text())
    traces, failures = {}, list(manifest.errors)
    for i, entry in enumerate(manifest.entries):
        name = Path(entry["path"]).name
        try:
            hr = manifest.load(i)
            if replay is not None:
                if name not in replay:
                    raise InvalidArgument("no trace for this file in --trace-in")
                trace = DegradationTrace.from_dict(replay[name])
                lr = apply_trace(hr, trace)
            else:
                lr, trace = degrade(hr, Prng(args.seed).split(name))
        except InvalidArgument as exc:
            failures.append({"path": entry["path"], "error": str(exc)})
            continue
        stem = Path(name).stem
        write_image(out / f"{stem}.png", lr)
        (out / f"{stem}.trace.json").write_text(trace.to_json() + "\n")
        traces[name] = trace.to_dict()
    if args.trace_out:
        _write_json(args.trace_out, traces)
    print(f"degraded {len(traces)} images into {out}")
    if failures:
        for f in failures:
            print(f"error: {f['path']}: {f['error']}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK


def _preview(model, cfg: RunConfig, batch, path, n=4):
    """Sample grid: conditioning, sample, target per row."""
    c, x = batch.c[:n].astype(np.float64), batch.x[:n]
    c_tau, _ = noise_augment(c, cfg.t_eval, Prng(cfg.seed).split("preview/nca"), cfg.schedule)
    out = ancestral_sample(DenoiserAdapter(model), c_tau, cfg.t_eval, cfg.sampler,
                           Prng(cfg.seed).split("preview"), cfg.schedule)
    save_grid([[ci, oi, xi] for ci, oi, xi in zip(c, out, x)], path)
    model.train()


def cmd_train(args):
    cfg = load_run_config(args)
    ckpt = Path(args.checkpoint_out)
    out_dir = Path(args.out_dir) if args.out_dir else ckpt.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "run_config.json")
    manifest = ingest(args.data, cfg.scale_profile)
    images = [manifest.load(i) for i in range(len(manifest.entries))]
    dataset = build_training_set(images, cfg.data.train_pairs, Prng(cfg.seed).split("pairs"),
                                 cfg.scale_profile, DegradeConfig(), cfg.use_degradations)
    every = cfg.train.log_every

    def callback(state):
        if every and state.step % every == 0:
            log.info("step %d loss %.4f", state.step, np.mean(state.losses[-every:]))
            _preview(state.sampling_model, cfg, dataset, out_dir / f"samples_{state.step:07d}.png")

    model, losses, state = train_run(cfg, dataset, callback)
    save_checkpoint(ckpt, model, cfg.train_config, state,
                    {"run_config": cfg.to_dict(), "run_config_hash": cfg.hash()})
    window = min(1000, max(1, len(losses) // 10))
    sm = smooth(losses, window)
    _write_csv(out_dir / "loss.csv", ["step", "loss", "smoothed"],
               [{"step": i + 1, "loss": float(v), "smoothed": float(s)}
                for i, (v, s) in enumerate(zip(losses, sm))])
    plot_loss(losses, out_dir / "loss.png", window)
    _preview(state.sampling_model, cfg, dataset, out_dir / "samples_final.png")
    print(f"trained {len(losses)} steps (config {cfg.hash()}), final loss {sm[-1]:.4f} -> {ckpt}")


def _check_divisible(model, h, w):
    div = 2 ** (model.cfg.levels - 1)
    if h % div or w % div:
        raise InvalidArgument(f"upsampled size {h}x{w} must be divisible by {div} "
                              f"(2^(levels-1) for this {model.cfg.levels}-level UNet)")


def cmd_sample(args):
    model, cfg = _load_model(args.checkpoint)
    lr = read_image(args.input)
    if lr.channels != model.cfg.image_channels:
        raise InvalidArgument(f"input has {lr.channels} channels, model expects "
                              f"{model.cfg.image_channels}")
    m = get_profile(cfg.scale_profile).magnification
    h, w = lr.height * m, lr.width * m
    _check_divisible(model, h, w)
    sched = cfg.schedule
    c = resize_array(lr.data.astype(np.float64), (h, w), "bicubic")[None]
    prng = Prng(args.seed)
    c_tau, _ = noise_augment(c, args.t_eval, prng.split("nca"), sched)
    out = ancestral_sample(DenoiserAdapter(model), c_tau, args.t_eval,
                           DiffusionStepPlan(args.steps), prng.split("sample"), sched)
    write_image(args.output, out[0])
    print(f"{lr.height}x{lr.width} -> {h}x{w}: {args.output}")


def cmd_make_eval_set(args):
    cfg = load_run_config(args)
    manifest = ingest(args.data, cfg.scale_profile, "eval", args.lr_data)
    sigma = cfg.data.eval_noise_sigma if args.lr_data is None else None
    pairs = build_eval_set(manifest, Prng(cfg.seed).split("evalset"), cfg.data.eval_crops_per_image,
                           cfg.data.eval_hr_size, DegradeConfig(), sigma)
    save_eval_set(args.output, pairs)
    cfg.save(Path(args.output) / "run_config.json")
    print(f"{len(pairs)} pairs -> {args.output}")


def _eval_inputs(args):
    if not (Path(args.eval_set) / "index.json").exists():
        raise InvalidArgument(f"no eval set at {args.eval_set} (missing index.json)")
    model, cfg = _load_model(args.checkpoint)
    if args.steps:
        cfg = replace(cfg, sampler=DiffusionStepPlan(args.steps))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return model, cfg, load_eval_set(args.eval_set)


def cmd_eval(args):
    model, cfg, pairs = _eval_inputs(args)
    t_eval = cfg.t_eval if args.t_eval is None else args.t_eval
    report = evaluate_model(DenoiserAdapter(model), cfg, pairs, t_eval)
    out = Path(args.output) if args.output else Path(args.eval_set) / f"report_t{t_eval:.3f}.json"
    _write_json(out, report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_sweep(args):
    model, cfg, pairs = _eval_inputs(args)
    grid = parse_grid(args.t_eval_grid)
    reports = run_sweep(cfg, grid, model=model, pairs=pairs)
    out = Path(args.output_dir)
    _write_csv(out / "sweep.csv", REPORT_FIELDS, [r.to_dict() for r in reports])
    _write_json(out / "sweep.json", {"config_hash": cfg.hash(), "rows": [r.to_dict() for r in reports]})
    plot_sweep(reports, out / "sweep.png", f"config {cfg.hash()}")
    for r in reports:
        print(f"t_eval={r.t_eval:.2f}  frechet={r.frechet:.5f}  psnr={r.psnr_mean:.2f}  "
              f"ssim={r.ssim_mean:.4f}")


def cmd_ablate(args):
    cfg = load_run_config(args)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "run_config.json")
    _write_json(out / "arm_hashes.json", {a: cfg.with_arm(a).hash() for a in ARMS})
    rows = run_ablation(cfg, seeds, args.cache)
    _write_csv(out / "ablation.csv", ["seed", "arm", "use_degradations", "use_nca"] + REPORT_FIELDS,
               rows)
    plot_ablation(rows, out / "ablation.png")
    orders = ablation_orderings(rows)
    summary = {"orderings": {str(k): v for k, v in orders.items()}}
    if args.sweep_grid:
        grid = parse_grid(args.sweep_grid)
        summary["sweep_ok"] = {}
        for seed in seeds:
            run = replace(cfg, seed=seed).with_arm("full")
            reports = run_sweep(run, grid, args.cache)
            _write_csv(out / f"sweep_seed{seed}.csv", REPORT_FIELDS, [r.to_dict() for r in reports])
            plot_sweep(reports, out / f"sweep_seed{seed}.png", f"full arm, seed {seed}")
            if 0.1 in grid and 0.4 in grid:
                summary["sweep_ok"][str(seed)] = sweep_ordering(reports)
    _write_json(out / "summary.json", summary)
    for r in rows:
        print(f"seed {r['seed']}  {r['arm']:<16} frechet={r['frechet']:.5f}  "
              f"psnr={r['psnr_mean']:.2f}  ssim={r['ssim_mean']:.4f}")
    print(json.dumps(summary, sort_keys=True))


# --- parser --------------------------------------------------------------------


def _config_flags(p, arm=True):
    p.add_argument("--config", help="RunConfig JSON (default: the small experiment config)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config value, e.g. train.steps=500 (repeatable)")
    p.add_argument("--seed", type=int)
    if arm:
        p.add_argument("--arm", choices=sorted(ARMS), help="set both ablation toggles")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sr3plus", description=__doc__.splitlines()[0])
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic texture corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["png", "ppm"], default="png")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="index a corpus into a manifest")
    p.add_argument("--input", required=True)
    p.add_argument("--lr-input")
    p.add_argument("--profile", default="desk")
    p.add_argument("--split", default="train")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("degrade", help="synthesize LR images with recorded traces")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--profile", default="desk")
    p.add_argument("--trace-out")
    p.add_argument("--trace-in", help="replay traces from a --trace-out file instead of sampling")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="train a denoiser on a corpus directory")
    _config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--out-dir", help="loss CSV, plots and sample grids (default: checkpoint dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="super-resolve one LR image by 4x")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--t-eval", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("make-eval-set", help="crop aligned LR/HR evaluation pairs")
    _config_flags(p, arm=False)
    p.add_argument("--data", required=True)
    p.add_argument("--lr-data", help="paired LR directory (otherwise LR is synthesized)")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_make_eval_set)

    for name, func, help_ in [("eval", cmd_eval, "score a checkpoint at one t_eval"),
                              ("sweep", cmd_sweep, "score a checkpoint over a t_eval grid")]:
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--eval-set", required=True)
        p.add_argument("--steps", type=int, help="sampler steps (default: from the checkpoint)")
        p.add_argument("--seed", type=int)
        if name == "eval":
            p.add_argument("--t-eval", type=float)
            p.add_argument("--output")
        else:
            p.add_argument("--t-eval-grid", default="0:0.4:0.05")
            p.add_argument("--output-dir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train and score the four ablation arms")
    _config_flags(p, arm=False)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--output-dir", required=True)
    p.add_argument("--cache", help="directory for cached runs (default: no cache)")
    p.add_argument("--sweep-grid", help="also sweep t_eval for the full arm, e.g. 0:0.4:0.05")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("SR3PLUS_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    try:
        code = args.func(args)
    except (TrainingDiverged, SamplingDiverged) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InvalidArgument, EmptyCorpusError, TensorFormatError, CheckpointError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
