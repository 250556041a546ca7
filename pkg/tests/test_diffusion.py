import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from delayscan.diffusion import (PairedBatch, PairedSample, build_schedule, collate, load_schedule, make_condition,
                                 predict, q_sample, q_step, sample_step, save_schedule, training_loss)
from delayscan.exceptions import DivergenceError, ScheduleError, ShapeError, StepIndexError
from delayscan.numerics import RngStream, gaussian_sample

from conftest import randomize_

SCHED = build_schedule()


def zero_denoiser(c, t, td):
    return torch.zeros_like(c[:, 1:])


def test_schedule_examples():
    s = build_schedule(1, 0.01, 0.01)
    assert s.alpha_bar[0] == pytest.approx(0.99, abs=1e-15)
    betas = [1e-4 + i * (0.02 - 1e-4) / 299 for i in range(300)]
    assert SCHED.alpha_bar[-1] == pytest.approx(math.prod(1 - b for b in betas), rel=1e-12)
    assert abs(SCHED.alpha_bar[-1] - 0.0477) < 1e-3
    assert build_schedule(50, 1e-12, 1e-12).alpha_bar[-1] == pytest.approx(1.0, abs=1e-9)
    assert SCHED.beta[0] == 1e-4 and SCHED.beta[-1] == pytest.approx(0.02, abs=1e-15)
    np.testing.assert_allclose(SCHED.sigma ** 2, SCHED.beta, rtol=1e-14)


def test_schedule_monotone():
    assert np.all(np.diff(np.sqrt(SCHED.alpha_bar)) < 0)
    assert np.all(np.diff(np.sqrt(1 - SCHED.alpha_bar)) > 0)


def test_posterior_sigma():
    s = build_schedule(sigma_mode="posterior")
    assert s.sigma[0] == 0.0
    t = 10
    expected = SCHED.beta[t - 1] * (1 - SCHED.alpha_bar[t - 2]) / (1 - SCHED.alpha_bar[t - 1])
    assert s.sigma[t - 1] ** 2 == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.01), (10, 0.02, 0.01), (10, 0.1, 1.0)])
def test_schedule_rejects(args):
    with pytest.raises(ScheduleError):
        build_schedule(*args)


def test_schedule_rejects_mode():
    with pytest.raises(ScheduleError):
        build_schedule(sigma_mode="learned")


def test_schedule_tables_read_only():
    with pytest.raises(ValueError):
        SCHED.beta[0] = 1.0


def test_schedule_roundtrip(tmp_path):
    save_schedule(SCHED, tmp_path)
    back = load_schedule(tmp_path)
    np.testing.assert_array_equal(back.alpha_bar, SCHED.alpha_bar)


@pytest.mark.parametrize("t", [0, 301])
def test_step_bounds(t):
    with pytest.raises(StepIndexError):
        q_sample(torch.zeros(2, 2), t, torch.zeros(2, 2), SCHED)


def test_q_step_examples():
    x = torch.rand(4, 4, dtype=torch.float64)
    e = torch.randn(4, 4, dtype=torch.float64)
    t = 17
    assert torch.equal(q_step(x, t, SCHED, eps=torch.zeros_like(x)), math.sqrt(SCHED.alpha[t - 1]) * x)
    assert torch.equal(q_step(torch.zeros_like(x), t, SCHED, eps=e), math.sqrt(SCHED.beta[t - 1]) * e)


def test_q_step_draws_from_rng():
    x = torch.zeros(3, 3, dtype=torch.float64)
    a = q_step(x, 5, SCHED, rng=RngStream(2))
    b = q_step(x, 5, SCHED, rng=RngStream(2))
    assert torch.equal(a, b) and a.abs().sum() > 0


def test_forward_composition_all_steps():
    x0 = torch.rand(3, 3, dtype=torch.float64)
    x, noise_sq = x0.clone(), 0.0
    for t in range(1, SCHED.T + 1):
        x = q_step(x, t, SCHED, eps=torch.zeros_like(x0))
        noise_sq = SCHED.alpha[t - 1] * noise_sq + SCHED.beta[t - 1]
        assert (x - math.sqrt(SCHED.alpha_bar[t - 1]) * x0).abs().max() <= 1e-10
        assert abs(noise_sq - (1 - SCHED.alpha_bar[t - 1])) <= 1e-10
        if t == 5:
            assert torch.allclose(x, q_sample(x0, 5, torch.zeros_like(x0), SCHED), atol=1e-15)


def test_forward_composition_recorded_noise_is_gaussian_with_matching_variance():
    # with recorded noises, x_t - sqrt(abar) x0 is a weighted noise sum whose weights square-sum to 1 - abar
    rng = RngStream(11)
    n, t_max = 20000, 40
    x0 = torch.full((n,), 0.3, dtype=torch.float64)
    x = x0.clone()
    for t in range(1, t_max + 1):
        x = q_step(x, t, SCHED, rng=rng)
    resid = x - math.sqrt(SCHED.alpha_bar[t_max - 1]) * x0
    assert abs(resid.var().item() / (1 - SCHED.alpha_bar[t_max - 1]) - 1) < 0.05


def test_q_sample_examples():
    x0 = torch.rand(5, 5, dtype=torch.float64)
    e = torch.randn(5, 5, dtype=torch.float64)
    t = 123
    assert torch.equal(q_sample(x0, t, torch.zeros_like(x0), SCHED), math.sqrt(SCHED.alpha_bar[t - 1]) * x0)
    assert torch.equal(q_sample(torch.zeros_like(x0), t, e, SCHED), math.sqrt(1 - SCHED.alpha_bar[t - 1]) * e)


def test_q_sample_monte_carlo_mean():
    n, t = 100000, 150
    x0 = torch.tensor([0.1, 0.5, 0.9, 0.0], dtype=torch.float64)
    eps = torch.as_tensor(gaussian_sample(RngStream(3), (n, 4)))
    xt = q_sample(x0.expand(n, 4), t, eps, SCHED)
    ab = SCHED.alpha_bar[t - 1]
    bound = 3 * math.sqrt((1 - ab) / n)
    assert (xt.mean(0) - math.sqrt(ab) * x0).abs().max() <= bound
    assert abs(xt.var(0).mean().item() - (1 - ab)) < 0.02


def test_q_sample_batched_steps():
    x0 = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    e = torch.randn_like(x0)
    t = torch.tensor([1, 50, 300])
    out = q_sample(x0, t, e, SCHED)
    for i in range(3):
        assert torch.allclose(out[i], q_sample(x0[i], int(t[i]), e[i], SCHED), atol=1e-15)


def test_q_sample_shape_mismatch():
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 2), 1, torch.zeros(3, 3), SCHED)


def _sample(seed=0, size=8, td=90):
    g = np.random.default_rng(seed)
    return PairedSample(g.uniform(size=(size, size)), g.uniform(size=(size, size)), 60, 60 + td, id="s")


def test_training_loss_stubs():
    s = _sample()
    eps = torch.randn(8, 8, dtype=torch.float64)
    seen = {}

    def eps_oracle(c, t, td):
        seen["c"], seen["td"] = c, td
        return eps.reshape(1, 1, 8, 8)

    assert training_loss(eps_oracle, s, 10, eps, SCHED).item() == 0.0
    assert torch.equal(seen["c"][0, 0], torch.as_tensor(s.x_e))
    assert seen["td"].tolist() == [90]
    loss = training_loss(zero_denoiser, s, 10, eps, SCHED)
    assert loss.item() == pytest.approx((eps ** 2).mean().item(), rel=1e-15)


def test_training_loss_straight_line_recomputation(tiny_model):
    randomize_(tiny_model, seed=3, scale=0.2)
    g = np.random.default_rng(1)
    x_e, x_0 = g.uniform(size=(2, 8, 8)), g.uniform(size=(2, 8, 8))
    eps = g.normal(size=(2, 8, 8))
    t, td = [7, 250], [60, 115]
    batch = PairedBatch(torch.tensor(x_e)[:, None], torch.tensor(x_0)[:, None], torch.tensor(td))
    loss = training_loss(tiny_model, batch, torch.tensor(t), torch.tensor(eps)[:, None], SCHED).item()
    # independent recomputation from the schedule product
    total = 0.0
    for i in range(2):
        ab = np.prod([1 - (1e-4 + k * (0.02 - 1e-4) / 299) for k in range(t[i])])
        xt = np.sqrt(ab) * x_0[i] + np.sqrt(1 - ab) * eps[i]
        c = torch.tensor(np.stack([x_e[i], xt]))[None]
        with torch.no_grad():
            eh = tiny_model(c, torch.tensor([t[i]]), torch.tensor([td[i]]))[0, 0].numpy()
        total += np.sum((eps[i] - eh) ** 2)
    assert loss == pytest.approx(total / eps.size, abs=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2 ** 32 - 1))
def test_training_loss_nonnegative(t, seed):
    g = np.random.default_rng(seed)
    eps = torch.as_tensor(g.normal(size=(4, 4)))
    stub = lambda c, tt, td: c[:, 1:] * 0.3
    s = PairedSample(g.uniform(size=(4, 4)), g.uniform(size=(4, 4)), 60, 120)
    assert training_loss(stub, s, t, eps, SCHED).item() >= 0


def test_training_loss_shape_check():
    with pytest.raises(ShapeError):
        training_loss(lambda c, t, td: c, _sample(), 3, torch.zeros(8, 8, dtype=torch.float64), SCHED)


def test_single_step_recovery():
    s = build_schedule(1, 0.01, 0.01)
    x0 = torch.rand(8, 8, dtype=torch.float64)
    eps = torch.randn(8, 8, dtype=torch.float64)
    x1 = q_sample(x0, 1, eps, s)
    out = sample_step(x1, torch.rand(8, 8, dtype=torch.float64), 1, 30, lambda c, t, td: eps[None, None], s)
    assert (out - x0).abs().max() <= 1e-10


def test_sample_step_zero_denoiser_and_noise():
    x = torch.randn(2, 1, 4, 4, dtype=torch.float64)
    xe = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    t = 40
    out = sample_step(x, xe, t, 60, zero_denoiser, SCHED)
    assert torch.allclose(out, x / math.sqrt(SCHED.alpha[t - 1]), atol=1e-15)
    z = torch.randn_like(x)
    noisy = sample_step(x, xe, t, 60, zero_denoiser, SCHED, z=z)
    assert torch.allclose(noisy - out, SCHED.sigma[t - 1] * z, atol=1e-14)
    # z is ignored at t == 1
    assert torch.equal(sample_step(x, xe, 1, 60, zero_denoiser, SCHED, z=z), sample_step(x, xe, 1, 60, zero_denoiser, SCHED))


def test_sample_step_condition_and_shapes():
    xe = torch.rand(4, 4, dtype=torch.float64)
    seen = []
    sample_step(torch.randn(4, 4, dtype=torch.float64), xe, 3, 60,
                lambda c, t, td: seen.append(c.clone()) or torch.zeros_like(c[:, 1:]), SCHED)
    assert torch.equal(seen[0][0, 0], xe)
    with pytest.raises(ShapeError):
        sample_step(torch.zeros(4, 4), torch.zeros(5, 5), 3, 60, zero_denoiser, SCHED)
    with pytest.raises(ShapeError):
        make_condition(torch.zeros(1, 1, 2, 2), torch.zeros(1, 1, 3, 3))


def test_predict_deterministic_and_shape(tiny_model):
    xe = torch.rand(8, 8, dtype=torch.float64)
    s = build_schedule(20)
    a = predict(xe, 90, tiny_model, s, RngStream(4))
    b = predict(xe, 90, tiny_model, s, RngStream(4))
    assert a.shape == xe.shape and torch.equal(a, b)
    assert a.min() >= 0 and a.max() <= 1
    c = predict(xe, 90, tiny_model, s, RngStream(5))
    assert not torch.equal(a, c)


def test_predict_condition_channel_bit_identical(tiny_model):
    randomize_(tiny_model, seed=1, scale=0.1)
    xe = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    steps = []

    def watch(t, c, x):
        steps.append(t)
        assert torch.equal(c[:, :1], xe)

    predict(xe, torch.tensor([60, 100]), tiny_model, SCHED, RngStream(0), callback=watch)
    assert steps == list(range(300, 0, -1))


def test_predict_teacher_forced_oracle():
    x0 = torch.rand(1, 1, 8, 8, dtype=torch.float64) * 0.8 + 0.1
    abar = torch.tensor(SCHED.alpha_bar)

    def oracle(c, t, td):
        ab = abar[t - 1].view(-1, 1, 1, 1)
        return (c[:, 1:] - ab.sqrt() * x0) / (1 - ab).sqrt()

    out = predict(torch.zeros_like(x0), 90, oracle, SCHED, RngStream(9))
    assert ((out - x0) ** 2).mean().item() < 1e-3


def test_predict_divergence():
    with pytest.raises(DivergenceError) as info:
        predict(torch.zeros(4, 4), 60, lambda c, t, td: torch.full_like(c[:, 1:], float("nan")), SCHED, RngStream(0))
    assert info.value.where == 300


def test_paired_sample_contract():
    s = _sample(td=45)
    assert s.t_d == 45
    with pytest.raises(ShapeError):
        PairedSample(np.zeros((2, 2)), np.zeros((3, 3)), 0, 1)
    with pytest.raises(ValueError):
        PairedSample(np.zeros((2, 2)), np.zeros((2, 2)), 90, 60)
    b = collate([s, _sample(1, td=10)])
    assert b.x_e.shape == (2, 1, 8, 8) and b.t_d.tolist() == [45, 10]
