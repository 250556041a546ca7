import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from delayscan import trainer as trainer_mod
from delayscan.exceptions import ConfigError, ShapeError, TrainingError
from delayscan.phantom import generate_dataset
from delayscan.trainer import (AdamState, TrainConfig, ablate, ablation_grid, adam_step, evaluate, load_checkpoint,
                               predict_images, read_loss_trace, train, write_ablation_csv)

TINY = TrainConfig(T=50, stages=2, base_channels=8, channel_multipliers=(1, 2), n_res=1, n_trans=1, time_dim=8,
                   heads=2, batch_size=2, max_steps=6, dtype="float64", seed=3)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(20, 16, seed=1)


def reference_adam(p, grads, lr, b1, b2, eps):
    """Textbook Adam in numpy, one scalar array, a sequence of gradients."""
    m = v = np.zeros_like(p)
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


def test_adam_zero_gradient():
    p = {"w": torch.randn(3, 3, dtype=torch.float64)}
    out, state = adam_step(p, {"w": torch.zeros(3, 3, dtype=torch.float64)}, AdamState())
    assert torch.equal(out["w"], p["w"]) and state.step == 1


def test_adam_skips_parameters_without_gradient():
    p = {"w": torch.randn(2, dtype=torch.float64), "unused": torch.randn(2, dtype=torch.float64)}
    g = {"w": torch.ones(2, dtype=torch.float64)}
    out, state = adam_step(p, g, AdamState(lr=0.1))
    assert torch.equal(out["unused"], p["unused"]) and "unused" not in state.m
    np.testing.assert_allclose(out["w"].numpy(), reference_adam(p["w"].numpy(), [np.ones(2)], 0.1, 0.5, 0.999, 1e-8))


def test_train_with_unused_delay_branch(data):
    # no transformer + per-stage EC parity: only skipped blocks would see the delay vector
    cfg = replace(TINY, use_transformer=False, use_delay_time=False)
    before = train(data, replace(cfg, max_steps=0, epochs=0)).model.delay_embed.state_dict()
    after = train(data, cfg).model.delay_embed.state_dict()
    assert all(torch.equal(before[k], after[k]) for k in before)


def test_adam_first_step_scalar():
    out, _ = adam_step({"w": torch.tensor([0.0], dtype=torch.float64)}, {"w": torch.tensor([1.0], dtype=torch.float64)},
                       AdamState(lr=1e-4, beta1=0.5, beta2=0.999, eps=1e-8))
    assert out["w"].item() == pytest.approx(-1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_matches_reference_sequence():
    g = np.random.default_rng(0)
    p0 = g.normal(size=5)
    grads = [g.normal(size=5) for _ in range(20)]
    state = AdamState(lr=1e-2, beta1=0.5, beta2=0.999, eps=1e-8)
    p = {"a": torch.tensor(p0)}
    for gr in grads:
        p, state = adam_step(p, {"a": torch.tensor(gr)}, state)
    np.testing.assert_allclose(p["a"].numpy(), reference_adam(p0, grads, 1e-2, 0.5, 0.999, 1e-8), rtol=1e-12)


def test_adam_inplace_vs_copy_and_determinism():
    g = torch.randn(4, dtype=torch.float64)
    p1 = {"a": torch.ones(4, dtype=torch.float64)}
    out1, _ = adam_step(p1, {"a": g}, AdamState())
    assert torch.equal(p1["a"], torch.ones(4, dtype=torch.float64))
    p2 = {"a": torch.ones(4, dtype=torch.float64)}
    out2, _ = adam_step(p2, {"a": g}, AdamState(), inplace=True)
    assert out2["a"] is p2["a"] and torch.equal(out1["a"], out2["a"])


def test_adam_permutation_invariance():
    g = torch.Generator().manual_seed(1)
    names = ["a", "b", "c"]
    params = {n: torch.randn(2, 3, generator=g, dtype=torch.float64) for n in names}
    grads = {n: torch.randn(2, 3, generator=g, dtype=torch.float64) for n in names}
    fwd, _ = adam_step(params, grads, AdamState())
    rev_p = {n: params[n] for n in reversed(names)}
    rev_g = {n: grads[n] for n in reversed(names)}
    rev, _ = adam_step(rev_p, rev_g, AdamState())
    assert all(torch.equal(fwd[n], rev[n]) for n in names)


def test_adam_errors():
    p = {"w": torch.zeros(2, dtype=torch.float64)}
    with pytest.raises(TrainingError, match="w"):
        adam_step(p, {"w": torch.tensor([1.0, float("inf")], dtype=torch.float64)}, AdamState())
    with pytest.raises(ShapeError):
        adam_step(p, {"w": torch.zeros(3, dtype=torch.float64)}, AdamState())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(dtype="float16")
    assert TrainConfig().denoiser_config().embed_mode == "ec"
    assert TrainConfig().schedule().T == 300


def test_train_deterministic_and_initial_loss(data):
    a = train(data[:8], TINY)
    b = train(data[:8], TINY)
    assert a.loss_trace == b.loss_trace
    assert len(a.loss_trace) == 6 and [s for s, _ in a.loss_trace] == list(range(1, 7))
    assert all(l >= 0 for _, l in a.loss_trace)
    assert abs(a.loss_trace[0][1] - 1.0) <= 0.2 * 2   # batch of 2 -> noisy estimate of E[eps^2] = 1
    c = train(data[:8], replace(TINY, seed=4))
    assert c.loss_trace != a.loss_trace


def test_initial_loss_near_one(data):
    cfg = replace(TINY, batch_size=8, max_steps=1)
    first = train(data[:8], cfg).loss_trace[0][1]
    assert abs(first - 1.0) <= 0.2


def test_epochs_define_step_count(data):
    r = train(data[:5], replace(TINY, max_steps=0, epochs=2))
    assert len(r.loss_trace) == 2 * math.ceil(5 / 2)


def test_checkpoint_files_and_roundtrip(tmp_path, data):
    r = train(data[:8], replace(TINY, checkpoint_every=3), out_dir=tmp_path)
    ck_root = tmp_path / "checkpoints"
    assert sorted(p.name for p in ck_root.iterdir()) == ["latest", "step_000003", "step_000006"]
    assert (ck_root / "latest").read_text().strip() == "step_000006"
    assert read_loss_trace(tmp_path / "loss.csv") == r.loss_trace
    ck = load_checkpoint(ck_root / "step_000006")
    assert ck.step == 6 and ck.image_shape == (16, 16) and ck.delay_range == r.delay_range
    sd = ck.model.state_dict()
    assert all(torch.equal(sd[k], v) for k, v in r.model.state_dict().items())
    assert ck.adam.step == 6 and set(ck.adam.m) == set(dict(r.model.named_parameters()))


def test_resume_bit_exact_float64(tmp_path, data):
    full = train(data[:8], replace(TINY, max_steps=8))
    train(data[:8], replace(TINY, max_steps=4), out_dir=tmp_path)
    resumed = train(data[:8], replace(TINY, max_steps=8), resume=tmp_path / "checkpoints" / "step_000004")
    assert resumed.loss_trace == full.loss_trace


def test_resume_float32_close(tmp_path, data):
    cfg = replace(TINY, dtype="float32")
    full = train(data[:8], replace(cfg, max_steps=8))
    train(data[:8], replace(cfg, max_steps=4), out_dir=tmp_path)
    resumed = train(data[:8], replace(cfg, max_steps=8), resume=tmp_path / "checkpoints" / "step_000004")
    a, b = np.array(full.loss_trace)[:, 1], np.array(resumed.loss_trace)[:, 1]
    np.testing.assert_allclose(b, a, rtol=1e-6)


def test_resume_rejects_other_network(tmp_path, data):
    train(data[:4], replace(TINY, max_steps=2), out_dir=tmp_path)
    with pytest.raises(ConfigError):
        train(data[:4], replace(TINY, base_channels=16), resume=tmp_path / "checkpoints" / "step_000002")


def test_nonfinite_loss_names_step(monkeypatch, data):
    real = trainer_mod.training_loss
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        loss = real(*args)
        return loss * float("nan") if calls["n"] == 3 else loss

    monkeypatch.setattr(trainer_mod, "training_loss", flaky)
    with pytest.raises(TrainingError, match="step 3"):
        train(data[:4], TINY)


def test_empty_training_set():
    with pytest.raises(TrainingError):
        train([], TINY)


def test_predict_and_evaluate(data):
    r = train(data[:8], replace(TINY, max_steps=2))
    x_e = np.stack([s.x_e for s in data[-3:]])
    a = predict_images(r.model, r.schedule, x_e, 90, seed=1)
    b = predict_images(r.model, r.schedule, x_e, 90, seed=1)
    assert a.shape == (3, 16, 16) and np.array_equal(a, b)
    test = [s for s in data if s.split == "test"]
    reports, agg, preds = evaluate(r.model, r.schedule, test, seed=2)
    assert len(reports) == 2 and preds.shape == (2, 16, 16) and math.isfinite(agg.psnr)


def test_ablation_grids():
    comp = dict(ablation_grid("components", TINY))
    assert list(comp) == ["DDPM", "DDPM+Trans", "DDPM+DT", "DDPM+Trans+DT"]
    assert not comp["DDPM"].use_transformer and not comp["DDPM"].use_delay_time
    assert comp["DDPM+Trans+DT"].use_transformer and comp["DDPM+Trans+DT"].use_delay_time
    modes = ablation_grid("modes", TINY)
    assert [n for n, _ in modes] == ["EC", "LA", "LC", "AD"] and [c.embed_mode for _, c in modes] == ["ec", "la", "lc", "ad"]
    with pytest.raises(ConfigError):
        ablation_grid("other", TINY)


def test_ablate_modes_grid(tmp_path, data):
    rep = ablate(data, ablation_grid("modes", replace(TINY, max_steps=2)), seeds=[0], out_csv=tmp_path / "abl.csv")
    assert len(rep.summary) == 4 and len(rep.rows) == 4
    for row in rep.summary:
        assert all(math.isfinite(getattr(row, k)) for k in ("psnr", "ssim", "mse", "ffd")) and not row.error
    psnrs = [r.psnr for r in rep.summary]
    assert psnrs == sorted(psnrs, reverse=True)
    lines = (tmp_path / "abl.csv").read_text().splitlines()
    assert lines[0] == "config,psnr,ssim,mse,ffd" and len(lines) == 5
    assert (tmp_path / "abl.seeds.csv").read_text().splitlines()[0] == "config,psnr,ssim,mse,ffd,seed,error"


def test_ablate_records_failed_cell(monkeypatch, data):
    real = trainer_mod.train

    def picky(ds, cfg, *a, **k):
        if cfg.embed_mode == "lc":
            raise TrainingError("boom")
        return real(ds, cfg, *a, **k)

    monkeypatch.setattr(trainer_mod, "train", picky)
    rep = ablate(data, ablation_grid("modes", replace(TINY, max_steps=1)), seeds=[0])
    lc = rep.by_config()["LC"]
    assert math.isnan(lc.psnr) and "boom" in lc.error
    assert rep.summary[-1].config == "LC"


def test_ablate_needs_splits(data):
    with pytest.raises(ConfigError):
        ablate([s for s in data if s.split == "train"], ablation_grid("modes", TINY))


def test_write_ablation_csv_repr_floats(tmp_path):
    from delayscan.trainer import AblationRow
    write_ablation_csv([AblationRow("X", 1 / 3, 0.5, 0.1, float("nan"))], tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().splitlines()[1] == "X,0.3333333333333333,0.5,0.1,nan"
