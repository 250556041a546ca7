"""``delayscan`` command line: phantom, train, predict, eval, ablate, audit.

Exit codes: 0 success, 1 I/O failure / divergence / failed audit,
2 invalid arguments. Seeds come from ``--seed``, then the ``STDTPM_SEED``
environment variable, then the config. Every run directory gets a
``resolved.cfg`` with all effective settings.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .audit import run_audit
from .config import RunConfig
from .exceptions import ConfigError, DelayScanError, NumericError, TrainingError
from .metrics import aggregate, image_report
from .numerics import load_grid, save_grid
from .phantom import generate_dataset, load_dataset, save_dataset, select_split
from .trainer import ablate, ablation_grid, evaluate, load_checkpoint, predict_images, train
from .validation import check_delays, check_images

log = logging.getLogger("delayscan")

SEED_ENV = "STDTPM_SEED"
SPLITS = ("train", "val", "test")
EVAL_FIELDS = ["id", "mse", "psnr_db", "ssim", "split"]


class UsageError(Exception):
    """Bad arguments; exit code 2."""


def resolve_seed(flag, fallback: int) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV, "").strip()
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return int(fallback)


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None))
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        cfg.set(key.strip(), value.strip())
    cfg.train_config()
    return cfg


def write_pgm(path, image: np.ndarray) -> None:
    """Binary 8-bit PGM, values round(255 * clip(x, 0, 1)) with halves rounded up."""
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    data = np.floor(255.0 * np.clip(img, 0.0, 1.0) + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8, count=w * h).reshape(h, w)


def _checkpoint_dir(path) -> Path:
    """Accept a checkpoint directory or a training run directory (uses its latest checkpoint)."""
    p = Path(path)
    if (p / "manifest.txt").exists():
        return p
    latest = p / "checkpoints" / "latest"
    if latest.exists():
        return p / "checkpoints" / latest.read_text().strip()
    raise UsageError(f"no checkpoint found at {p}")


def _data_dir(path) -> Path:
    p = Path(path)
    if not (p / "index.csv").is_file():
        raise UsageError(f"dataset directory {p} missing or has no index.csv")
    return p


def _fmt(x: float) -> str:
    return repr(float(x))


# --------------------------------------------------------------------------
# commands


def cmd_phantom(args) -> int:
    cfg = load_config(args)
    for flag, key in (("count", "phantom.count"), ("size", "phantom.size"), ("td_lo", "phantom.td_lo"),
                      ("td_hi", "phantom.td_hi"), ("eta", "phantom.eta")):
        if getattr(args, flag) is not None:
            cfg.set(key, getattr(args, flag))
    cfg.set("phantom.seed", resolve_seed(args.seed, cfg["phantom.seed"]))
    count, size, lo, hi = (cfg[k] for k in ("phantom.count", "phantom.size", "phantom.td_lo", "phantom.td_hi"))
    if count < 1:
        raise UsageError("--count must be at least 1")
    if size < 4:
        raise UsageError("--size must be at least 4")
    if not 0 <= lo <= hi <= 600:
        raise UsageError(f"delay range must satisfy 0 <= td-lo <= td-hi <= 600, got {lo}..{hi}")
    samples = generate_dataset(count, size, (lo, hi), cfg["phantom.seed"], cfg["phantom.eta"])
    out = Path(args.out)
    save_dataset(samples, out)
    cfg.write_resolved(out)
    log.info("wrote %d pairs to %s", count, out)
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    data = _data_dir(args.data_dir)
    cfg.set("trainer.seed", resolve_seed(args.seed, cfg["trainer.seed"]))
    samples = select_split(load_dataset(data), "train")
    if not samples:
        raise UsageError(f"{data} has no training split")
    resume = _checkpoint_dir(args.resume) if args.resume else None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    every = max(1, args.log_every)

    def progress(step, loss):
        if step % every == 0:
            log.info("step %d loss %.6f", step, loss)

    result = train(samples, cfg.train_config(), out_dir=out, resume=resume, callback=progress)
    log.info("finished at step %d, checkpoint %s", result.loss_trace[-1][0] if result.loss_trace else 0,
             result.checkpoint)
    return 0


def cmd_predict(args) -> int:
    cfg = load_config(args)
    seed = resolve_seed(args.seed, cfg["sample.seed"])
    cfg.set("sample.seed", seed)
    ck = load_checkpoint(_checkpoint_dir(args.checkpoint))
    try:
        image = np.asarray(load_grid(args.early), dtype=np.float64)
    except FileNotFoundError:
        raise UsageError(f"early image {args.early} not found") from None
    image = np.squeeze(image) if image.ndim > 2 else image
    if image.ndim != 2 or image.shape != tuple(ck.image_shape):
        raise UsageError(f"image shape {image.shape} does not match the checkpoint's {tuple(ck.image_shape)}")
    x_e = check_images(image, "early image")
    td = int(check_delays(args.td, 1)[0])
    lo, hi = ck.delay_range
    if ck.model.config.use_delay_time and not lo <= td <= hi:
        print(f"warning: delay {td} min outside the trained range [{lo}, {hi}]", file=sys.stderr)
    pred = predict_images(ck.model, ck.schedule, x_e, [td], seed)[0]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_grid(out.with_suffix(".grd"), pred)
    write_pgm(out.with_suffix(".pgm"), pred)
    cfg.write_resolved(out.parent)
    log.info("wrote %s and %s", out.with_suffix(".grd"), out.with_suffix(".pgm"))
    return 0


def cmd_eval(args) -> int:
    if args.split not in SPLITS:
        raise UsageError(f"unknown split {args.split!r}; choose from {', '.join(SPLITS)}")
    if not args.ground_truth and not args.checkpoint:
        raise UsageError("give --checkpoint, or --ground-truth to score the data against itself")
    cfg = load_config(args)
    seed = resolve_seed(args.seed, cfg["sample.seed"])
    cfg.set("sample.seed", seed)
    samples = select_split(load_dataset(_data_dir(args.data_dir)), args.split)
    if not samples:
        raise UsageError(f"split {args.split!r} is empty")
    peak = cfg["metric.peak"]
    if args.ground_truth:
        truth = [s.x_0 for s in samples]
        reports = [image_report(x, x, peak, s.id, args.split) for x, s in zip(truth, samples)]
        agg = aggregate(reports, truth, truth, None, args.split)
    else:
        ck = load_checkpoint(_checkpoint_dir(args.checkpoint))
        shape = samples[0].x_e.shape
        if shape != tuple(ck.image_shape):
            raise UsageError(f"dataset images {shape} do not match the checkpoint's {tuple(ck.image_shape)}")
        reports, agg, _ = evaluate(ck.model, ck.schedule, samples, seed=seed, peak=peak, split=args.split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS)
        for r in reports + [agg]:
            w.writerow([r.id, _fmt(r.mse), _fmt(r.psnr), _fmt(r.ssim), r.split])
    n_features = min(cfg["metric.ffd_features"], len(samples) - 1)
    with open(out.with_suffix(".ffd.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "n_images", "n_features", "ffd"])
        w.writerow([args.split, len(samples), n_features, _fmt(agg.ffd)])
    cfg.write_resolved(out.parent)
    log.info("%s: mean psnr %.3f dB, ssim %.4f, mse %.3g, ffd %.4g", args.split, agg.psnr, agg.ssim, agg.mse, agg.ffd)
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    if args.grid:
        cfg.set("ablation.grid", args.grid)
    if args.seeds:
        cfg.set("ablation.seeds", args.seeds)
    samples = load_dataset(_data_dir(args.data_dir))
    grid = ablation_grid(cfg["ablation.grid"], cfg.train_config())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    report = ablate(samples, grid, list(cfg["ablation.seeds"]), out_csv=out, peak=cfg["metric.peak"])
    cfg.write_resolved(out.parent)
    for row in report.summary:
        print(f"{row.config}\tpsnr={row.psnr:.3f}\tssim={row.ssim:.4f}\tmse={row.mse:.4g}\tffd={row.ffd:.4g}")
    failed = [r.config for r in report.rows if r.error]
    if failed:
        print(f"failed cells: {', '.join(sorted(set(failed)))}", file=sys.stderr)
        return 1
    return 0


def cmd_audit(args) -> int:
    cfg = load_config(args)
    cfg.set("audit.seed", resolve_seed(args.seed, cfg["audit.seed"]))
    summary = run_audit(cfg)
    json.dump(summary.as_dict(), sys.stdout, indent=2, allow_nan=True)
    sys.stdout.write("\n")
    if args.out_dir:
        cfg.write_resolved(args.out_dir)
    if not summary.passed:
        print("failing checks: " + ", ".join(summary.failing), file=sys.stderr)
        return 1
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delayscan", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        sp.add_argument("--seed", type=int, default=None, help=f"overrides ${SEED_ENV} and the config")
        if config:
            sp.add_argument("--config", default=None, help="key=value config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")

    sp = sub.add_parser("phantom", help="generate a paired synthetic dataset")
    common(sp)
    sp.add_argument("--count", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--td-lo", type=int)
    sp.add_argument("--td-hi", type=int)
    sp.add_argument("--eta", type=float)
    sp.add_argument("--out", default="phantom_data")
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train a denoiser on the train split")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--out-dir", default="run")
    sp.add_argument("--resume", default=None, help="checkpoint or run directory to continue from")
    sp.add_argument("--log-every", type=int, default=50)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="sample a delayed scan from an early scan")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--early", required=True, help="GRD1 early scan")
    sp.add_argument("--td", type=int, required=True, help="delay in minutes")
    sp.add_argument("--out", required=True, help="output path; .grd and .pgm are written")
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("eval", help="per-image and aggregate metrics over a split")
    common(sp)
    sp.add_argument("--checkpoint", default=None)
    sp.add_argument("--ground-truth", action="store_true", help="score the targets against themselves")
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--out", default="eval.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and compare a grid of configurations")
    common(sp)
    sp.add_argument("--data-dir", required=True)
    sp.add_argument("--grid", choices=("components", "modes"), default=None)
    sp.add_argument("--seeds", default=None, help="comma-separated, e.g. 0,1,2")
    sp.add_argument("--out", default="ablation.csv")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("audit", help="gradient checks and structural invariants")
    common(sp)
    sp.add_argument("--out-dir", default=None, help="where to write resolved.cfg")
    sp.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    warnings.simplefilter("default")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DelayScanError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
