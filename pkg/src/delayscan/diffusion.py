"""Noise schedule, forward noising, the conditional reverse step and sampling.

Images travel as torch tensors. Single images are ``(H, W)``; batches are
``(B, 1, H, W)``. A *denoiser* is any callable
``denoiser(c, t, t_d) -> eps_hat`` taking a condition batch ``c`` of shape
``(B, 2, H, W)`` (channel 0 the early scan, channel 1 the noisy delayed scan)
and integer tensors ``t`` and ``t_d`` of shape ``(B,)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .exceptions import DivergenceError, ScheduleError, ShapeError, StepIndexError
from .numerics import RngStream, gaussian_sample, load_grid, save_grid

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; index ``t - 1`` holds the value for step ``t``."""

    T: int
    beta_start: float
    beta_end: float
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    sigma_mode: str = "beta"

    def check_step(self, t) -> None:
        lo, hi = (int(t), int(t)) if np.ndim(t) == 0 else (int(np.min(t)), int(np.max(t)))
        if lo < 1 or hi > self.T:
            raise StepIndexError(f"diffusion step {lo if lo < 1 else hi} outside [1, {self.T}]")

    def at(self, name: str, t):
        """Table value for step ``t`` (int -> float, tensor -> tensor)."""
        table = getattr(self, name)
        self.check_step(t if not torch.is_tensor(t) else t.cpu().numpy())
        if torch.is_tensor(t):
            return torch.tensor(table)[t.long().cpu() - 1]
        return float(table[int(t) - 1])


def build_schedule(T: int = 300, beta_start: float = 1e-4, beta_end: float = 0.02,
                   sigma_mode: str = "beta") -> NoiseSchedule:
    """Linear beta schedule.

    ``sigma_mode="beta"`` uses ``sigma_t**2 = beta_t``; ``"posterior"`` uses
    the posterior variance ``beta_t (1 - abar_{t-1}) / (1 - abar_t)``.
    """
    T = int(T)
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64)
        beta = beta_start + steps * (beta_end - beta_start) / (T - 1)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    if sigma_mode == "beta":
        sigma = np.sqrt(beta)
    elif sigma_mode == "posterior":
        prev = np.concatenate([[1.0], alpha_bar[:-1]])
        sigma = np.sqrt(beta * (1.0 - prev) / (1.0 - alpha_bar))
    else:
        raise ScheduleError(f"unknown sigma_mode {sigma_mode!r}")
    for a in (beta, alpha, alpha_bar, sigma):
        a.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), beta, alpha, alpha_bar, sigma, sigma_mode)


def save_schedule(schedule: NoiseSchedule, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / "schedule.txt").write_text(
        f"T={schedule.T}\nbeta_start={schedule.beta_start!r}\n"
        f"beta_end={schedule.beta_end!r}\nsigma_mode={schedule.sigma_mode}\n"
    )
    save_grid(d / "beta.grd", schedule.beta)
    save_grid(d / "alpha_bar.grd", schedule.alpha_bar)
    save_grid(d / "sigma.grd", schedule.sigma)


def load_schedule(directory) -> NoiseSchedule:
    d = Path(directory)
    header = dict(line.split("=", 1) for line in (d / "schedule.txt").read_text().split())
    sched = build_schedule(int(header["T"]), float(header["beta_start"]), float(header["beta_end"]),
                           header.get("sigma_mode", "beta"))
    for name in ("beta", "alpha_bar", "sigma"):
        if not np.array_equal(load_grid(d / f"{name}.grd"), getattr(sched, name)):
            raise ScheduleError(f"stored {name} table disagrees with its header")
    return sched


# --------------------------------------------------------------------------
# paired data


@dataclass
class PairedSample:
    x_e: np.ndarray
    x_0: np.ndarray
    st_early: int
    st_delayed: int
    id: str = ""
    split: str = "train"
    meta: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.x_e = np.asarray(self.x_e)
        self.x_0 = np.asarray(self.x_0)
        if self.x_e.shape != self.x_0.shape or self.x_e.ndim != 2:
            raise ShapeError(f"x_e {self.x_e.shape} and x_0 {self.x_0.shape} must be equal 2-D shapes")
        if int(self.st_delayed) < int(self.st_early):
            raise ValueError("delayed scan precedes early scan")

    @property
    def t_d(self) -> int:
        return int(self.st_delayed) - int(self.st_early)


@dataclass
class PairedBatch:
    x_e: torch.Tensor   # (B, 1, H, W)
    x_0: torch.Tensor   # (B, 1, H, W)
    t_d: torch.Tensor   # (B,) int64


def collate(samples: Sequence[PairedSample], dtype=torch.float64) -> PairedBatch:
    x_e = torch.as_tensor(np.stack([s.x_e for s in samples]), dtype=dtype).unsqueeze(1)
    x_0 = torch.as_tensor(np.stack([s.x_0 for s in samples]), dtype=dtype).unsqueeze(1)
    t_d = torch.tensor([s.t_d for s in samples], dtype=torch.int64)
    return PairedBatch(x_e, x_0, t_d)


def _as_batch(x, dtype=None) -> tuple[torch.Tensor, Callable]:
    """Lift (H, W), (B, H, W) or (B, 1, H, W) to 4-D; return an undo function."""
    x = torch.as_tensor(x, dtype=dtype)
    if x.ndim == 2:
        return x[None, None], lambda y: y[0, 0]
    if x.ndim == 3:
        return x[:, None], lambda y: y[:, 0]
    if x.ndim == 4 and x.shape[1] == 1:
        return x, lambda y: y
    raise ShapeError(f"expected (H,W), (B,H,W) or (B,1,H,W), got {tuple(x.shape)}")


def _steps(t, batch: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.int64)
    return t.expand(batch).clone() if t.ndim == 0 else t


def _coef(values, like: torch.Tensor):
    if torch.is_tensor(values):
        return values.to(like.dtype).view(-1, *([1] * (like.ndim - 1)))
    return values


def make_condition(x_e: torch.Tensor, x_t: torch.Tensor) -> torch.Tensor:
    """Channel concatenation: channel 0 is the early scan, channel 1 the noisy image."""
    if x_e.shape != x_t.shape:
        raise ShapeError(f"condition halves differ: {tuple(x_e.shape)} vs {tuple(x_t.shape)}")
    return torch.cat([x_e, x_t], dim=1)


# --------------------------------------------------------------------------
# forward process


def q_step(x_prev, t: int, schedule: NoiseSchedule, rng: RngStream | None = None, eps=None):
    """One forward Markov step ``sqrt(alpha_t) x + sqrt(beta_t) eps``."""
    schedule.check_step(t)
    x_prev = torch.as_tensor(x_prev)
    if eps is None:
        eps = torch.as_tensor(gaussian_sample(rng, x_prev.shape), dtype=x_prev.dtype)
    eps = torch.as_tensor(eps, dtype=x_prev.dtype)
    return math.sqrt(schedule.at("alpha", t)) * x_prev + math.sqrt(schedule.at("beta", t)) * eps


def q_sample(x_0, t, eps, schedule: NoiseSchedule):
    """Closed-form noising ``sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``.

    ``t`` is an int or, for batched ``x_0`` with a leading batch axis, a
    tensor of per-sample steps.
    """
    x_0 = torch.as_tensor(x_0)
    eps = torch.as_tensor(eps, dtype=x_0.dtype)
    if eps.shape != x_0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x_0 shape {tuple(x_0.shape)}")
    ab = schedule.at("alpha_bar", t)
    if torch.is_tensor(ab):
        ab = _coef(ab, x_0)
        return ab.sqrt() * x_0 + (1.0 - ab).sqrt() * eps
    return math.sqrt(ab) * x_0 + math.sqrt(1.0 - ab) * eps


def training_loss(denoiser: Denoiser, sample, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Mean squared error between ``eps`` and the denoiser's noise estimate.

    ``sample`` is a :class:`PairedSample` or :class:`PairedBatch`. The early
    scan enters the condition un-noised.
    """
    if isinstance(sample, PairedSample):
        dtype = eps.dtype if torch.is_tensor(eps) else torch.float64
        sample = collate([sample], dtype=dtype)
    x_e, x_0 = sample.x_e, sample.x_0
    eps = torch.as_tensor(eps, dtype=x_0.dtype).reshape(x_0.shape)
    t = _steps(t, x_0.shape[0])
    x_t = q_sample(x_0, t, eps, schedule)
    eps_hat = denoiser(make_condition(x_e, x_t), t, sample.t_d)
    if eps_hat.shape != eps.shape:
        raise ShapeError(f"denoiser returned {tuple(eps_hat.shape)}, expected {tuple(eps.shape)}")
    return ((eps - eps_hat) ** 2).mean()


# --------------------------------------------------------------------------
# reverse process


def _reverse(x4, xe4, t: int, t_d, denoiser, schedule, z4):
    c = make_condition(xe4, x4)
    b = x4.shape[0]
    eps_hat = denoiser(c, _steps(t, b), t_d)
    alpha, beta, ab = schedule.at("alpha", t), schedule.at("beta", t), schedule.at("alpha_bar", t)
    x_prev = (x4 - (beta / math.sqrt(1.0 - ab)) * eps_hat) / math.sqrt(alpha)
    if z4 is not None and t > 1:
        x_prev = x_prev + schedule.at("sigma", t) * z4
    return c, x_prev


def sample_step(x_t, x_e, t: int, t_d, denoiser: Denoiser, schedule: NoiseSchedule, z=None):
    """One reverse step: posterior mean from the noise estimate plus ``sigma_t z``.

    ``z=None`` means zero noise (always the case at ``t == 1``).
    """
    schedule.check_step(t)
    xt4, undo = _as_batch(x_t)
    xe4, _ = _as_batch(x_e, dtype=xt4.dtype)
    if xe4.shape != xt4.shape:
        raise ShapeError(f"x_e {tuple(xe4.shape)} and x_t {tuple(xt4.shape)} differ")
    z4 = None if z is None else _as_batch(z, dtype=xt4.dtype)[0]
    _, x_prev = _reverse(xt4, xe4, t, _steps(t_d, xt4.shape[0]), denoiser, schedule, z4)
    return undo(x_prev)


@torch.no_grad()
def predict(x_e, t_d, denoiser: Denoiser, schedule: NoiseSchedule, rng: RngStream,
            callback: Callable | None = None, dtype=None):
    """Run the full reverse chain from pure noise and return the delayed-scan estimate.

    The early scan is re-concatenated at every step. Clipping to [0, 1]
    happens only on the final output. ``callback(t, c, x_prev)`` observes
    each step.
    """
    xe4, undo = _as_batch(x_e, dtype=dtype)
    shape = tuple(xe4.shape)
    t_d = _steps(t_d, shape[0])
    x = torch.as_tensor(gaussian_sample(rng, shape), dtype=xe4.dtype)
    for t in range(schedule.T, 0, -1):
        z = torch.as_tensor(gaussian_sample(rng, shape), dtype=xe4.dtype) if t > 1 else None
        c, x = _reverse(x, xe4, t, t_d, denoiser, schedule, z)
        if not torch.isfinite(x).all():
            raise DivergenceError(f"non-finite values at reverse step t={t}", where=t)
        if callback is not None:
            callback(t, c, x)
    return undo(x.clamp(0.0, 1.0))
