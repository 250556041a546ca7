"""Gradient checks and structural invariants, runnable as one suite.

Each check returns an :class:`AuditResult`. Gradient checks compare torch
autograd against central finite differences in float64 on a seeded subset
of coordinates of every tensor involved.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .denoiser import DenoiserConfig, HybridDenoiser, PixelTransformerBlock, ResidualBlock, pixel_attention
from .diffusion import PairedBatch, build_schedule, predict, q_sample, q_step, sample_step, training_loss
from .init import init_parameters, xavier_uniform_
from .numerics import GradCheckReport, RngStream, grad_check, softmax_rows
from .time_embedding import BottleneckMLP, film_inject

BLOCK_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class AuditResult:
    name: str
    passed: bool
    max_rel_error: float | None = None
    tol: float | None = None
    detail: str = ""
    seconds: float = 0.0

    def as_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def analytic_gradient(name: str, loss: torch.Tensor, tensors: list[torch.Tensor]) -> list[torch.Tensor]:
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    return [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]


def check_tensors(name: str, loss_fn: Callable[[], torch.Tensor], tensors: list[torch.Tensor],
                  tol: float, rng: RngStream, coords: int = 12) -> GradCheckReport:
    """Finite-difference check of ``loss_fn`` w.r.t. ``tensors`` (modified in place, then restored)."""
    sizes = [t.numel() for t in tensors]
    offsets = np.cumsum([0] + sizes)
    base = torch.cat([t.detach().reshape(-1) for t in tensors]).numpy().copy()
    current = base.copy()

    def assign(x):
        # only rewrite the tensors that changed; full copies dominate on big models
        x = x.reshape(-1)
        changed = np.flatnonzero(x != current)
        if changed.size == 0:
            return
        owners = np.unique(np.searchsorted(offsets, changed, side="right") - 1)
        with torch.no_grad():
            for j in owners:
                o, n = offsets[j], sizes[j]
                tensors[j].copy_(torch.from_numpy(x[o:o + n].copy()).view_as(tensors[j]))
        current[:] = x

    def value(x):
        assign(x)
        with torch.no_grad():
            return float(loss_fn())

    def gradient(x):
        assign(x)
        with torch.enable_grad():
            grads = analytic_gradient(name, loss_fn(), tensors)
        return torch.cat([g.reshape(-1) for g in grads]).detach().numpy()

    idx = []
    for o, n in zip(offsets, sizes):
        k = min(n, coords)
        idx.extend(o + rng.permutation(n)[:k])
    try:
        return grad_check(value, base, tol, grad=gradient, indices=np.array(idx), name=name)
    finally:
        assign(base)


def _leaf(a) -> torch.Tensor:
    return torch.as_tensor(a, dtype=torch.float64).clone().requires_grad_(True)


def _probe(rng, shape):
    return torch.as_tensor(rng.normal(shape), dtype=torch.float64)


def _randomize(module: torch.nn.Module, rng: RngStream) -> None:
    """Xavier weights plus small random biases / norm affines, so no gradient is trivially zero."""
    init_parameters(module, rng)
    with torch.no_grad():
        for name, p in module.named_parameters():
            if p.ndim >= 2:
                xavier_uniform_(p, rng)
            else:
                p.add_(0.1 * _probe(rng, tuple(p.shape)))


# --------------------------------------------------------------------------
# gradient checks


def _report(name, build, tol, rng, coords) -> AuditResult:
    t0 = time.perf_counter()
    loss_fn, tensors = build()
    rep = check_tensors(name, loss_fn, tensors, tol, rng, coords)
    detail = "" if rep.passed else f"{rep.failed.size} coordinates above tolerance"
    return AuditResult(name, rep.passed, rep.max_rel_error, tol, detail, time.perf_counter() - t0)


def grad_time_mlp(cfg: RunConfig, rng: RngStream) -> AuditResult:
    N = cfg["model.time_dim"]

    def build():
        mlp = BottleneckMLP(N).double()
        _randomize(mlp, rng)
        T_s, r = _leaf(rng.uniform(N, -1, 1)), _probe(rng, N)
        return (lambda: (mlp(T_s) * r).sum()), [T_s] + list(mlp.parameters())

    return _report("grad:time_mlp", build, BLOCK_TOL, rng, cfg["audit.coords"])


def grad_film(cfg: RunConfig, rng: RngStream) -> AuditResult:
    N, C, S = cfg["model.time_dim"], 4, cfg["audit.size"]

    def build():
        M, T_u = _leaf(rng.normal((C, S, S))), _leaf(rng.normal(N))
        w, b = _leaf(0.1 * rng.normal((2 * C, N))), _leaf(0.1 * rng.normal(2 * C))
        r = _probe(rng, (C, S, S))
        return (lambda: (film_inject(M, T_u, w, b) * r).sum()), [M, T_u, w, b]

    return _report("grad:film_inject", build, BLOCK_TOL, rng, cfg["audit.coords"])


def grad_residual(cfg: RunConfig, rng: RngStream) -> AuditResult:
    N, S = cfg["model.time_dim"], cfg["audit.size"]

    def build():
        block = ResidualBlock(2, 4, N).double()
        _randomize(block, rng)
        x, tv, r = _leaf(rng.normal((1, 2, S, S))), _leaf(rng.normal((1, N))), _probe(rng, (1, 4, S, S))
        return (lambda: (block(x, tv) * r).sum()), [x, tv] + list(block.parameters())

    return _report("grad:residual_block", build, BLOCK_TOL, rng, cfg["audit.coords"])


def grad_attention(cfg: RunConfig, rng: RngStream) -> AuditResult:
    N, D, L = cfg["model.time_dim"], 8, cfg["audit.size"] ** 2 // 4

    def build():
        xs, tu = _leaf(rng.normal((L, D))), _leaf(rng.normal(N))
        ws = [_leaf(rng.normal((D, D)) / math.sqrt(D)) for _ in range(3)]
        wt, bt = _leaf(rng.normal((D, N)) / math.sqrt(N)), _leaf(0.1 * rng.normal(D))
        r = _probe(rng, (L, D))
        heads = cfg["model.heads"] if D % cfg["model.heads"] == 0 else 1
        return (lambda: (pixel_attention(xs, tu, *ws, wt, bt, heads)[0] * r).sum()), [xs, tu, *ws, wt, bt]

    return _report("grad:pixel_attention", build, BLOCK_TOL, rng, cfg["audit.coords"])


def grad_transformer(cfg: RunConfig, rng: RngStream, traced: bool = False) -> AuditResult:
    N, S = cfg["model.time_dim"], cfg["audit.size"]
    C = 4

    def build():
        block = PixelTransformerBlock(C, C, cfg["model.heads"] if C % cfg["model.heads"] == 0 else 1, N).double()
        _randomize(block, rng)
        block.trace = [] if traced else None
        x, tv, r = _leaf(rng.normal((1, C, S, S))), _leaf(rng.normal((1, N))), _probe(rng, (1, C, S, S))
        return (lambda: (block(x, tv) * r).sum()), [x, tv] + list(block.parameters())

    name = "grad:transformer_block" + (":explicit" if traced else ":fused")
    return _report(name, build, BLOCK_TOL, rng, cfg["audit.coords"])


def desk_config(cfg: RunConfig, **overrides) -> DenoiserConfig:
    kw = dict(stages=cfg["model.stages"], base_channels=cfg["model.base_channels"],
              channel_multipliers=cfg["model.channel_multipliers"], n_res=cfg["model.n_res"],
              n_trans=cfg["model.n_trans"], time_dim=cfg["model.time_dim"], heads=cfg["model.heads"],
              embed_mode=cfg["model.embed_mode"], use_transformer=cfg["model.use_transformer"],
              use_delay_time=cfg["trainer.use_delay_time"])
    kw.update(overrides)
    return DenoiserConfig(**kw)


def grad_unet_loss(cfg: RunConfig, rng: RngStream, model_config: DenoiserConfig | None = None) -> AuditResult:
    S = cfg["audit.size"]
    schedule = build_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])

    def build():
        model = HybridDenoiser(model_config or desk_config(cfg), rng=rng.fork(1)).double()
        _randomize(model, rng)
        x_e = torch.as_tensor(rng.uniform((2, 1, S, S)), dtype=torch.float64)
        x_0 = torch.as_tensor(rng.uniform((2, 1, S, S)), dtype=torch.float64)
        batch = PairedBatch(x_e, x_0, torch.tensor([60, 120]))
        t = torch.tensor([1, schedule.T])
        eps = _probe(rng, (2, 1, S, S))
        return (lambda: training_loss(model, batch, t, eps, schedule)), list(model.parameters())

    return _report("grad:unet_training_loss", build, END_TO_END_TOL, rng, max(1, cfg["audit.coords"] // 6))


# --------------------------------------------------------------------------
# structural invariants


def _timed(name: str, fn: Callable[[], tuple[bool, str]]) -> AuditResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return AuditResult(name, bool(ok), detail=detail, seconds=time.perf_counter() - t0)


def inv_softmax(cfg, rng) -> AuditResult:
    def run():
        m = 50.0 * rng.normal((64, 17))
        dev = float(np.abs(softmax_rows(m).sum(axis=1) - 1.0).max())
        return dev <= 1e-12, f"max row-sum deviation {dev:.2e}"

    return _timed("inv:softmax_rows", run)


def inv_forward_algebra(cfg, rng) -> AuditResult:
    def run():
        sched = build_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
        x0 = torch.as_tensor(rng.uniform((4, 4)), dtype=torch.float64)
        x, noise_sq, worst = x0.clone(), 0.0, 0.0
        zero = torch.zeros_like(x0)
        for t in range(1, sched.T + 1):
            x = q_step(x, t, sched, eps=zero)
            noise_sq = sched.alpha[t - 1] * noise_sq + sched.beta[t - 1]
            worst = max(worst, float((x - q_sample(x0, t, zero, sched)).abs().max()),
                        abs(noise_sq - (1.0 - sched.alpha_bar[t - 1])))
        return worst <= 1e-10, f"max deviation {worst:.2e}"

    return _timed("inv:forward_composition", run)


def inv_single_step(cfg, rng) -> AuditResult:
    def run():
        sched = build_schedule(1, 0.01, 0.01)
        x0 = torch.as_tensor(rng.uniform((1, 1, 8, 8)), dtype=torch.float64)
        eps = _probe(rng, (1, 1, 8, 8))
        x1 = q_sample(x0, 1, eps, sched)
        out = sample_step(x1, torch.zeros_like(x0), 1, 0, lambda c, t, td: eps, sched)
        err = float((out - x0).abs().max())
        return err <= 1e-10, f"recovery error {err:.2e}"

    return _timed("inv:single_step_recovery", run)


def inv_film_identity(cfg, rng) -> AuditResult:
    def run():
        M = _probe(rng, (2, 4, 5, 5))
        out = film_inject(M, _probe(rng, (2, 6)), torch.zeros(8, 6, dtype=torch.float64),
                          torch.zeros(8, dtype=torch.float64))
        return bool(torch.equal(out, M)), "zero-weight scale/shift is exact identity"

    return _timed("inv:film_zero_identity", run)


def inv_attention_and_condition(cfg, rng) -> AuditResult:
    """Attention rows, token counts at every block, and the early-scan channel over a full reverse chain."""
    def run():
        S = cfg["audit.size"]
        model = HybridDenoiser(desk_config(cfg, use_transformer=True), rng=rng.fork(2)).double()
        _randomize(model, rng)
        sched = build_schedule(cfg["schedule.T"], cfg["schedule.beta_start"], cfg["schedule.beta_end"])
        x_e = torch.as_tensor(rng.uniform((1, 1, S, S)), dtype=torch.float64)
        trace, bad_cond = [], []

        def watch(t, c, x_prev):
            if not torch.equal(c[:, :1], x_e):
                bad_cond.append(t)

        model.set_trace(trace)
        with torch.no_grad():
            out = model(torch.cat([x_e, x_e], 1), torch.tensor([5]), torch.tensor([90]))
        model.set_trace(None)
        predict(x_e, 90, model, sched, RngStream(0), callback=watch)
        n_trans = sum(isinstance(m, PixelTransformerBlock) for m in model.modules())
        rows_ok = all(r["row_sum_max_dev"] <= 1e-12 for r in trace)
        tokens_ok = all(r["tokens_attention"] == r["tokens_in"] + 1 == r["tokens_out"] + 1 for r in trace)
        ok = (len(trace) == n_trans and rows_ok and tokens_ok and not bad_cond
              and tuple(out.shape) == (1, 1, S, S))
        detail = (f"{len(trace)}/{n_trans} blocks traced, rows_ok={rows_ok}, tokens_ok={tokens_ok}, "
                  f"condition changed at {len(bad_cond)} of {sched.T} steps")
        return ok, detail

    return _timed("inv:attention_tokens_condition", run)


CHECKS: list[Callable[[RunConfig, RngStream], AuditResult]] = [
    grad_time_mlp,
    grad_film,
    grad_residual,
    grad_attention,
    lambda cfg, rng: grad_transformer(cfg, rng, traced=False),
    lambda cfg, rng: grad_transformer(cfg, rng, traced=True),
    grad_unet_loss,
    inv_softmax,
    inv_forward_algebra,
    inv_single_step,
    inv_film_identity,
    inv_attention_and_condition,
]


@dataclass
class AuditSummary:
    results: list[AuditResult] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    @property
    def failing(self) -> list[str]:
        return [r.name for r in self.results if not r.passed]

    def as_dict(self) -> dict:
        return {"passed": self.passed, "failing": self.failing, "seconds": round(self.seconds, 3),
                "checks": [r.as_dict() for r in self.results]}


def run_audit(cfg: RunConfig | None = None, checks=None) -> AuditSummary:
    cfg = cfg or RunConfig()
    root = RngStream(cfg["audit.seed"])
    t0 = time.perf_counter()
    summary = AuditSummary()
    for i, check in enumerate(checks if checks is not None else CHECKS):
        summary.results.append(check(cfg, root.fork(i)))
    summary.seconds = time.perf_counter() - t0
    return summary
