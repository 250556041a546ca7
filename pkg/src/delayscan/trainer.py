"""Adam, the training loop, checkpointing and the ablation harness."""
from __future__ import annotations

import csv
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .denoiser import DenoiserConfig, HybridDenoiser, load_weights, save_weights
from .diffusion import NoiseSchedule, PairedBatch, PairedSample, build_schedule, predict, training_loss
from .exceptions import ConfigError, DivergenceError, ShapeError, TrainingError
from .metrics import MetricReport, aggregate, image_report
from .numerics import RngStream, gaussian_sample, load_grid, save_grid

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: AdamState,
              inplace: bool = False):
    """Bias-corrected Adam update.

    Returns ``(params, state)``. With ``inplace=False`` the input parameter
    tensors are left untouched and new ones are returned; the moment buffers
    in ``state`` always advance. Parameters missing from ``grads`` (unused
    in the forward pass) are returned unchanged and keep their moments.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, "
                             f"parameter {tuple(params[name].shape)}")
    if not all(math.isfinite(float(g.sum())) for g in grads.values()):
        bad = next(n for n, g in grads.items() if not torch.isfinite(g).all())
        raise TrainingError(f"non-finite gradient for parameter {bad}")
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    out = {}
    for name, p in params.items():
        if name not in grads:
            out[name] = p if inplace else p.clone()
            continue
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m.mul_(state.beta1).add_(g, alpha=1.0 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1.0 - state.beta2)
        denom = (v / c2).sqrt_().add_(state.eps)
        target = p if inplace else p.clone()
        out[name] = target.addcdiv_(m, denom, value=-state.lr / c1)
    return out, state


# --------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    # schedule
    T: int = 300
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_mode: str = "beta"
    # network
    stages: int = 3
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    n_res: int = 2
    n_trans: int = 2
    time_dim: int = 64
    heads: int = 4
    embed_mode: str = "ec"
    use_transformer: bool = True
    use_delay_time: bool = True
    # optimization
    epochs: int = 200
    max_steps: int = 0          # > 0 overrides epochs
    batch_size: int = 8
    learning_rate: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dtype: str = "float32"
    checkpoint_every: int = 0   # 0: final checkpoint only

    def __post_init__(self):
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}")

    def denoiser_config(self) -> DenoiserConfig:
        names = {f.name for f in fields(DenoiserConfig)}
        return DenoiserConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def schedule(self) -> NoiseSchedule:
        return build_schedule(self.T, self.beta_start, self.beta_end, self.sigma_mode)

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]


@dataclass
class TrainResult:
    model: HybridDenoiser
    schedule: NoiseSchedule
    loss_trace: list[tuple[int, float]]
    adam: AdamState
    delay_range: tuple[int, int]
    checkpoint: Path | None = None


# --------------------------------------------------------------------------
# checkpoints


def write_loss_trace(trace: Sequence[tuple[int, float]], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss"])
        for step, loss in trace:
            w.writerow([step, repr(float(loss))])


def read_loss_trace(path) -> list[tuple[int, float]]:
    with open(path, newline="") as fh:
        return [(int(r["step"]), float(r["loss"])) for r in csv.DictReader(fh)]


def config_lines(config) -> list[str]:
    out = []
    for f in fields(config):
        v = getattr(config, f.name)
        out.append(f"{f.name}={','.join(map(str, v)) if isinstance(v, tuple) else v!r}")
    return out


def save_checkpoint(directory, model, adam: AdamState, rng: RngStream, step: int, config: TrainConfig,
                    trace, delay_range, image_shape) -> Path:
    d = Path(directory)
    extra = {
        "step": step,
        "rng_seed": rng.seed,
        "rng_counter": rng.counter,
        "td_min": delay_range[0],
        "td_max": delay_range[1],
        "image_h": image_shape[0],
        "image_w": image_shape[1],
        "T": config.T,
        "beta_start": repr(config.beta_start),
        "beta_end": repr(config.beta_end),
        "sigma_mode": config.sigma_mode,
    }
    save_weights(model, d, extra)
    adam_dir = d / "adam"
    adam_dir.mkdir(exist_ok=True)
    lines = [f"step={adam.step}", f"lr={adam.lr!r}", f"beta1={adam.beta1!r}",
             f"beta2={adam.beta2!r}", f"eps={adam.eps!r}"]
    for name in sorted(adam.m):
        save_grid(adam_dir / f"m.{name}.grd", adam.m[name].cpu().numpy())
        save_grid(adam_dir / f"v.{name}.grd", adam.v[name].cpu().numpy())
        lines.append(f"param={name}")
    (adam_dir / "state.txt").write_text("\n".join(lines) + "\n")
    (d / "train.cfg").write_text("\n".join(config_lines(config)) + "\n")
    write_loss_trace(trace, d / "loss.csv")
    return d


@dataclass
class Checkpoint:
    model: HybridDenoiser
    schedule: NoiseSchedule
    step: int
    rng: RngStream
    adam: AdamState
    delay_range: tuple[int, int]
    image_shape: tuple[int, int]
    trace: list[tuple[int, float]]


def load_checkpoint(directory) -> Checkpoint:
    d = Path(directory)
    if not (d / "manifest.txt").exists():
        raise FileNotFoundError(f"no checkpoint manifest in {d}")
    model, extra = load_weights(d)
    schedule = build_schedule(int(extra["T"]), float(extra["beta_start"]), float(extra["beta_end"]),
                              extra.get("sigma_mode", "beta"))
    adam = AdamState()
    names = []
    adam_state = d / "adam" / "state.txt"
    if adam_state.exists():
        for line in adam_state.read_text().splitlines():
            k, v = line.split("=", 1)
            if k == "param":
                names.append(v)
            elif k == "step":
                adam.step = int(v)
            else:
                setattr(adam, k, float(v))
        for name in names:
            adam.m[name] = torch.from_numpy(load_grid(d / "adam" / f"m.{name}.grd").copy())
            adam.v[name] = torch.from_numpy(load_grid(d / "adam" / f"v.{name}.grd").copy())
    trace = read_loss_trace(d / "loss.csv") if (d / "loss.csv").exists() else []
    return Checkpoint(
        model, schedule, int(extra["step"]),
        RngStream(int(extra["rng_seed"]), int(extra["rng_counter"])), adam,
        (int(extra["td_min"]), int(extra["td_max"])), (int(extra["image_h"]), int(extra["image_w"])), trace,
    )


# --------------------------------------------------------------------------
# training


def _stack(samples: Sequence[PairedSample], dtype):
    x_e = torch.as_tensor(np.stack([s.x_e for s in samples]), dtype=dtype).unsqueeze(1)
    x_0 = torch.as_tensor(np.stack([s.x_0 for s in samples]), dtype=dtype).unsqueeze(1)
    t_d = torch.tensor([s.t_d for s in samples], dtype=torch.int64)
    return x_e, x_0, t_d


def train(dataset: Sequence[PairedSample], config: TrainConfig, out_dir=None, resume=None,
          callback: Callable[[int, float], None] | None = None) -> TrainResult:
    """Noise-prediction training on every sample in ``dataset``.

    One epoch is one pass over ``dataset`` in an order drawn from the seed;
    each step draws per-sample diffusion steps uniformly from ``1..T`` and
    fresh Gaussian noise. ``out_dir`` receives ``loss.csv`` and checkpoints
    under ``checkpoints/step_XXXXXX``. ``resume`` names a checkpoint
    directory to continue from.
    """
    samples = list(dataset)
    if not samples:
        raise TrainingError("empty training set")
    dtype = config.torch_dtype
    schedule = config.schedule()
    x_e_all, x_0_all, td_all = _stack(samples, dtype)
    n, B = len(samples), config.batch_size
    steps_per_epoch = math.ceil(n / B)
    total = config.max_steps if config.max_steps > 0 else config.epochs * steps_per_epoch
    delay_range = (int(td_all.min()), int(td_all.max()))
    image_shape = tuple(x_e_all.shape[-2:])

    root = RngStream(config.seed)
    trace: list[tuple[int, float]] = []
    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.model.to(dtype)
        if ck.model.config != config.denoiser_config():
            raise ConfigError("checkpoint network configuration differs from the training config")
        adam = ck.adam
        adam.m = {k: v.to(dtype) for k, v in adam.m.items()}
        adam.v = {k: v.to(dtype) for k, v in adam.v.items()}
        noise_rng, step, trace = ck.rng, ck.step, list(ck.trace)
    else:
        model = HybridDenoiser(config.denoiser_config(), rng=root.fork(0)).to(dtype)
        adam = AdamState(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
        noise_rng, step = root.fork(1), 0

    out = Path(out_dir) if out_dir is not None else None
    ckpt_root = out / "checkpoints" if out is not None else None
    last_ckpt = None

    def checkpoint():
        nonlocal last_ckpt
        path = ckpt_root / f"step_{step:06d}"
        save_checkpoint(path, model, adam, noise_rng, step, config, trace, delay_range, image_shape)
        (ckpt_root / "latest").write_text(path.name + "\n")
        last_ckpt = path

    params = dict(model.named_parameters())
    order, order_epoch = None, -1
    model.train()
    while step < total:
        epoch, pos = divmod(step, steps_per_epoch)
        if epoch != order_epoch:
            order, order_epoch = root.fork(1000 + epoch).permutation(n), epoch
        idx = torch.as_tensor(order[pos * B:(pos + 1) * B])
        b = idx.numel()
        batch = PairedBatch(x_e_all[idx], x_0_all[idx], td_all[idx])
        t = torch.as_tensor(noise_rng.integers(1, config.T, b))
        eps = torch.as_tensor(gaussian_sample(noise_rng, (b, 1) + image_shape), dtype=dtype)

        model.zero_grad(set_to_none=True)
        try:
            loss = training_loss(model, batch, t, eps, schedule)
        except DivergenceError as exc:
            raise TrainingError(f"divergence at step {step + 1}: {exc}") from exc
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss at step {step + 1}; last checkpoint: {last_ckpt}")
        loss.backward()
        adam_step({k: p.detach() for k, p in params.items()},
                  {k: p.grad for k, p in params.items() if p.grad is not None}, adam, inplace=True)
        step += 1
        trace.append((step, value))
        if callback is not None:
            callback(step, value)
        if ckpt_root is not None and config.checkpoint_every and step % config.checkpoint_every == 0:
            checkpoint()

    model.eval()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_loss_trace(trace, out / "loss.csv")
        if last_ckpt is None or not last_ckpt.name.endswith(f"{step:06d}"):
            checkpoint()
    return TrainResult(model, schedule, trace, adam, delay_range, last_ckpt)


# --------------------------------------------------------------------------
# evaluation and ablation


def predict_images(model, schedule: NoiseSchedule, x_e, t_d, seed: int, chunk: int = 32) -> np.ndarray:
    """Batched reverse sampling for ``(n, H, W)`` early scans; returns ``(n, H, W)``."""
    x_e = np.asarray(x_e)
    t_d = np.broadcast_to(np.asarray(t_d, dtype=np.int64), (x_e.shape[0],)).copy()
    dtype = next(model.parameters()).dtype
    rng = RngStream(seed)
    out = []
    model.eval()
    for i in range(0, x_e.shape[0], chunk):
        xe = torch.as_tensor(x_e[i:i + chunk], dtype=dtype)
        out.append(predict(xe, torch.as_tensor(t_d[i:i + chunk]), model, schedule, rng).numpy())
    return np.concatenate(out).astype(np.float64)


def evaluate(model, schedule, samples: Sequence[PairedSample], seed: int = 0, peak: float = 1.0,
             n_features: int | None = None, split: str = "test"):
    preds = predict_images(model, schedule, np.stack([s.x_e for s in samples]), [s.t_d for s in samples], seed)
    truth = [s.x_0 for s in samples]
    reports = [image_report(x, p, peak, s.id, split) for x, p, s in zip(truth, preds, samples)]
    return reports, aggregate(reports, truth, list(preds), n_features, split), preds


ABLATION_FIELDS = ["config", "psnr", "ssim", "mse", "ffd"]


@dataclass
class AblationRow:
    config: str
    psnr: float
    ssim: float
    mse: float
    ffd: float
    seed: int | None = None
    error: str = ""


@dataclass
class AblationReport:
    rows: list[AblationRow]        # one per (config, seed)
    summary: list[AblationRow]     # median over seeds, ranked by PSNR

    def by_config(self) -> dict[str, AblationRow]:
        return {r.config: r for r in self.summary}


def ablation_grid(kind: str, base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """``components``: DDPM / +Trans / +DT / +Trans+DT. ``modes``: ec / la / lc / ad."""
    if kind == "components":
        return [
            ("DDPM", replace(base, use_transformer=False, use_delay_time=False)),
            ("DDPM+Trans", replace(base, use_transformer=True, use_delay_time=False)),
            ("DDPM+DT", replace(base, use_transformer=False, use_delay_time=True)),
            ("DDPM+Trans+DT", replace(base, use_transformer=True, use_delay_time=True)),
        ]
    if kind == "modes":
        return [(m.upper(), replace(base, embed_mode=m)) for m in ("ec", "la", "lc", "ad")]
    raise ConfigError(f"unknown ablation grid {kind!r}")


def ablate(dataset: Sequence[PairedSample], grid: Sequence[tuple[str, TrainConfig]],
           seeds: Sequence[int] | None = None, out_csv=None, peak: float = 1.0) -> AblationReport:
    """Train each configuration per seed, evaluate on the test split, rank by median PSNR.

    A failing cell is logged and recorded with NaN metrics; the others still run.
    """
    train_set = [s for s in dataset if s.split == "train"]
    test_set = [s for s in dataset if s.split == "test"]
    if not train_set or not test_set:
        raise ConfigError("ablation needs non-empty train and test splits")
    rows = []
    for name, cfg in grid:
        for seed in (seeds if seeds is not None else [cfg.seed]):
            try:
                result = train(train_set, replace(cfg, seed=seed))
                _, agg, _ = evaluate(result.model, result.schedule, test_set, seed=seed + 7919, peak=peak)
                rows.append(AblationRow(name, agg.psnr, agg.ssim, agg.mse, agg.ffd, seed))
            except Exception as exc:   # one bad cell must not stop the grid
                log.exception("ablation cell %s seed %s failed", name, seed)
                rows.append(AblationRow(name, math.nan, math.nan, math.nan, math.nan, seed, repr(exc)))
            log.info("ablation %s seed %s: %s", name, seed, rows[-1])
    summary = []
    for name, _ in grid:
        cell = [r for r in rows if r.config == name]

        def med(attr):
            vals = [getattr(r, attr) for r in cell if not math.isnan(getattr(r, attr))]
            return statistics.median(vals) if vals else math.nan

        errors = "; ".join(r.error for r in cell if r.error)
        summary.append(AblationRow(name, med("psnr"), med("ssim"), med("mse"), med("ffd"), None, errors))
    summary.sort(key=lambda r: math.inf if math.isnan(r.psnr) else -r.psnr)
    if out_csv is not None:
        write_ablation_csv(summary, out_csv)
        write_ablation_csv(rows, Path(out_csv).with_suffix(".seeds.csv"), with_seed=True)
    return AblationReport(rows, summary)


def write_ablation_csv(rows: Sequence[AblationRow], path, with_seed: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_FIELDS + (["seed", "error"] if with_seed else []))
        for r in rows:
            vals = [r.config] + [repr(float(getattr(r, k))) for k in ABLATION_FIELDS[1:]]
            w.writerow(vals + ([r.seed, r.error] if with_seed else []))
