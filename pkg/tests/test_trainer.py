import numpy as np
import pytest

import spherelm.trainer as trainer_mod
from spherelm.codebook import Codebook
from spherelm.denoiser import DenoiserConfig
from spherelm.exceptions import IncompatibleCheckpoint, NonFiniteLoss, ParameterOutOfRange, ShapeMismatch
from spherelm.geometry import sample_uniform
from spherelm.schedule import RefitParams, Schedule
from spherelm.tasks import copy_task, encode, generate_puzzle
from spherelm.trainer import (
    Adam,
    TrainConfig,
    Trainer,
    ce_loss,
    ce_loss_and_grad,
    load_checkpoint,
    loss_and_grads,
    make_noisy_latent,
)

from conftest import unit

def small_trainer(seed=0, arch="standard", vocab=5, **kw):
    mc = DenoiserConfig(arch, dim=8, n_layers=1, n_heads=2, cond_dim=8, vocab_size=vocab, freq_dim=8)
    kw.setdefault("batch_size", 4)
    return Trainer.create(mc, TrainConfig(**kw), seed=seed)


def toy_data(rng, n=16, length=6, vocab=5):
    return copy_task(length, vocab, rng, n)


class TestNoisyLatent:
    def setup_method(self):
        self.rng = np.random.default_rng(1)
        self.cb = Codebook.random(5, 6, self.rng)
        self.x = np.array([0, 3, 4, 1])
        self.z0 = unit(self.rng, 6, 4)

    def test_alpha_zero(self):
        z = make_noisy_latent(self.x, 0.0, self.z0, self.cb, Schedule("linear"))
        np.testing.assert_allclose(z, self.z0, atol=1e-15)

    def test_alpha_one(self):
        z = make_noisy_latent(self.x, 1.0, self.z0, self.cb, Schedule("linear"))
        np.testing.assert_allclose(z, self.cb.embed(self.x), atol=1e-12)

    @pytest.mark.parametrize("t", [0.0, 0.3, 0.9])
    def test_clean_positions_exact(self, t):
        mask = np.array([True, False, True, False])
        z = make_noisy_latent(self.x, t, self.z0, self.cb, Schedule("linear"), mask)
        np.testing.assert_array_equal(z[mask], self.cb.embed(self.x[mask]))

    def test_unit_norm(self):
        z = make_noisy_latent(self.x, 0.4, self.z0, self.cb, Schedule("cosine2"))
        np.testing.assert_allclose(np.linalg.norm(z, axis=-1), 1.0, atol=1e-12)

    def test_batched_times(self):
        x = np.stack([self.x, self.x])
        z0 = np.stack([self.z0, self.z0])
        z = make_noisy_latent(x, np.array([0.0, 1.0]), z0, self.cb, Schedule("linear"))
        np.testing.assert_allclose(z[0], self.z0, atol=1e-15)
        np.testing.assert_allclose(z[1], self.cb.embed(self.x), atol=1e-12)


class TestCrossEntropy:
    def test_large_margin(self):
        logits = np.zeros((1, 3, 5))
        x = np.array([[0, 2, 4]])
        logits[0, np.arange(3), x[0]] = 20.0
        per_pos = ce_loss(logits, x, np.ones((1, 3))) / 3
        assert per_pos <= 1e-8
        assert per_pos == pytest.approx(np.log1p(4 * np.exp(-20.0)), rel=1e-9)

    def test_uniform(self):
        loss = ce_loss(np.zeros((1, 7, 12)), np.zeros((1, 7), int), np.ones((1, 7)))
        assert loss / 7 == pytest.approx(np.log(12), abs=1e-12)
        assert np.log(12) == pytest.approx(2.4849, abs=1e-4)

    def test_sum_over_positions_mean_over_batch(self):
        loss = ce_loss(np.zeros((3, 4, 12)), np.zeros((3, 4), int), np.ones((3, 4)))
        assert loss == pytest.approx(4 * np.log(12))

    def test_zero_mask(self, rng):
        assert ce_loss(rng.standard_normal((2, 3, 5)), np.zeros((2, 3), int), np.zeros((2, 3))) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ce_loss(np.zeros((2, 3, 5)), np.zeros((2, 4), int), np.ones((2, 4)))

    def test_gradient(self, rng):
        logits = rng.standard_normal((2, 3, 5))
        x = rng.integers(0, 5, (2, 3))
        mask = rng.random((2, 3)) < 0.7
        _, per_seq, g = ce_loss_and_grad(logits, x, mask)
        assert per_seq.shape == (2,)
        h = 1e-6
        for idx in [(0, 0, 0), (1, 2, 4), (0, 1, 3)]:
            lp, lm = logits.copy(), logits.copy()
            lp[idx] += h
            lm[idx] -= h
            fd = (ce_loss(lp, x, mask) - ce_loss(lm, x, mask)) / (2 * h)
            assert g[idx] == pytest.approx(fd, abs=1e-8)


def test_codebook_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    tr = small_trainer()
    params = {k: v + 0.2 * rng.standard_normal(v.shape) for k, v in tr.state.params.items()}
    cb = Codebook(rng.standard_normal((5, 8)) * 1.5)
    x = np.array([[0, 1, 2, 3, 4, 1]])
    clean = np.array([[True, False, False, True, False, False]])
    loss_mask = (~clean).astype(float)
    t = np.array([0.6])
    alpha = Schedule().alpha(t)
    z0 = unit(rng, 8, (1, 6))

    def loss(table):
        return loss_and_grads(tr.model, params, Codebook(table), x, clean, loss_mask, t, alpha, z0)[0]

    grads = loss_and_grads(tr.model, params, cb, x, clean, loss_mask, t, alpha, z0)[2]
    h = 1e-6
    fd = np.zeros_like(cb.table)
    for idx in np.ndindex(cb.table.shape):
        tp, tm = cb.table.copy(), cb.table.copy()
        tp[idx] += h
        tm[idx] -= h
        fd[idx] = (loss(tp) - loss(tm)) / (2 * h)
    np.testing.assert_allclose(grads["codebook"], fd, rtol=1e-5, atol=1e-9)
    # only the normalized rows matter, so the raw gradient is orthogonal
    dots = np.sum(grads["codebook"] * cb.table, axis=1)
    assert np.all(np.abs(dots) <= 1e-6 * cb.norms * np.linalg.norm(grads["codebook"], axis=1) + 1e-15)


class TestAdam:
    def test_first_step_is_sign_times_lr(self):
        p = {"w": np.array([1.0, -2.0, 3.0])}
        m, v = Adam().init(p)
        Adam(lr=0.1, eps=0.0).update(p, {"w": np.array([0.5, -4.0, 1e-3])}, m, v, 1)
        np.testing.assert_allclose(p["w"], [0.9, -1.9, 2.9])

    def test_zero_lr(self):
        p = {"w": np.ones(3)}
        m, v = Adam().init(p)
        Adam(lr=0.0).update(p, {"w": np.ones(3)}, m, v, 1)
        np.testing.assert_array_equal(p["w"], np.ones(3))


class TestConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ParameterOutOfRange):
            TrainConfig(lr=-1.0)
        with pytest.raises(ParameterOutOfRange):
            TrainConfig(ema_rate=1.0)
        with pytest.raises(ParameterOutOfRange):
            TrainConfig(batch_size=0)

    def test_dict_roundtrip(self):
        cfg = TrainConfig(schedule=Schedule("cosine2", 0.7), refit=RefitParams())
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestStep:
    def test_lr_zero_freezes_params_and_ema_tracks(self, rng):
        tr = small_trainer(lr=0.0, ema_rate=0.5)
        before = {k: v.copy() for k, v in tr.state.trainable().items()}
        for k in tr.state.ema:
            tr.state.ema[k] = tr.state.ema[k] + 1.0
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=30)
        for k, v in tr.state.trainable().items():
            np.testing.assert_array_equal(v, before[k])
            np.testing.assert_allclose(tr.state.ema[k], v, atol=1e-8)

    def test_ema_one_step_from_identical_init(self, rng):
        tr = small_trainer(lr=0.0)
        x, mask = toy_data(rng)
        tr.step(x[:4], mask[:4])
        params, cb = tr.ema_params()
        for k, v in params.items():
            np.testing.assert_array_equal(v, tr.state.params[k])
        np.testing.assert_array_equal(cb.table, tr.state.codebook.table)

    def test_ema_rate_zero_tracks(self, rng):
        tr = small_trainer(ema_rate=0.0, lr=1e-2)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=5)
        params, cb = tr.ema_params()
        for k, v in params.items():
            np.testing.assert_array_equal(v, tr.state.params[k])
        np.testing.assert_array_equal(cb.table, tr.state.codebook.table)

    def test_ema_rate_near_one_keeps_init(self, rng):
        tr = small_trainer(ema_rate=1.0 - 1e-15, lr=1e-2)
        init = {k: v.copy() for k, v in tr.state.trainable().items()}
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=5)
        params, _ = tr.ema_params()
        for k, v in params.items():
            np.testing.assert_allclose(v, init[k], atol=1e-12)
            assert not np.array_equal(tr.state.params[k], init[k]) or not np.any(init[k])

    def test_ema_swap_leaves_training_params(self, rng):
        tr = small_trainer(lr=1e-2)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=3)
        before = {k: v.copy() for k, v in tr.state.params.items()}
        params, _ = tr.ema_params()
        for v in params.values():
            v += 1.0
        for k, v in tr.state.params.items():
            np.testing.assert_array_equal(v, before[k])

    def test_buffer_count(self, rng):
        tr = small_trainer(batch_size=3)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=7)
        assert len(tr.state.buffer) == 21
        assert len(tr.state.history) == 7
        assert tr.state.step == 7

    def test_buffer_is_bounded(self, rng):
        tr = small_trainer(batch_size=2, refit=RefitParams(refit_interval=5, warmup=10**6))
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=8)
        assert len(tr.state.buffer) == 10

    def test_alpha_respects_truncation(self, rng, monkeypatch):
        seen = []
        real = trainer_mod.loss_and_grads

        def spy(*args, **kw):
            seen.append(np.array(args[7]))
            return real(*args, **kw)

        monkeypatch.setattr(trainer_mod, "loss_and_grads", spy)
        tr = small_trainer(batch_size=8, schedule=Schedule("linear", 0.6))
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=20)
        alphas = np.concatenate(seen)
        assert alphas.size == 160
        assert alphas.max() <= 0.6
        times, _ = tr.state.buffer.arrays()
        assert np.all((times >= 0) & (times <= 1))

    def test_clean_positions_carry_no_loss(self, rng):
        tr = small_trainer()
        x, _ = toy_data(rng, n=4)
        all_clean = np.ones_like(x, dtype=bool)
        assert tr.step(x, all_clean) == 0.0

    def test_nonfinite_loss_aborts(self, rng):
        tr = small_trainer()
        tr.state.params["lm_head"][:] = np.nan
        x, mask = toy_data(rng, n=4)
        step_before = tr.state.step
        with pytest.raises((NonFiniteLoss, ArithmeticError)), np.errstate(invalid="ignore"):
            tr.step(x, mask)
        assert tr.state.step == step_before

    def test_reproject_after_step(self, rng):
        tr = small_trainer(lr=0.05, reproject_after_step=True)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=5)
        np.testing.assert_allclose(tr.state.codebook.norms, 1.0, atol=1e-12)

    def test_codebook_norm_grows_without_reproject(self, rng):
        tr = small_trainer(lr=0.05)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=20)
        assert np.all(tr.state.codebook.norms > 1.0)

    def test_adaptive_refit_runs(self, rng):
        rp = RefitParams(refit_interval=5, warmup=10, grid_size=8, min_points_per_grid=4)
        tr = small_trainer(batch_size=8, refit=rp)
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=25)
        assert tr.state.schedule.kind == "adaptive"
        assert tr.state.refit_state.count >= 2


def test_deterministic_runs(rng):
    x, mask = toy_data(rng)
    a, b = small_trainer(seed=5), small_trainer(seed=5)
    a.fit(x, mask, steps=10)
    b.fit(x, mask, steps=10)
    for k, v in a.state.trainable().items():
        np.testing.assert_array_equal(v, b.state.trainable()[k])
        np.testing.assert_array_equal(a.state.m[k], b.state.m[k])
        np.testing.assert_array_equal(a.state.ema[k], b.state.ema[k])
    assert a.state.buffer.entries == b.state.buffer.entries


def test_single_sequence_overfit():
    rng = np.random.default_rng(0)
    seq, mask = encode(generate_puzzle(10, rng))
    mc = DenoiserConfig("standard", dim=32, n_layers=2, n_heads=2, cond_dim=32, vocab_size=8)
    tr = Trainer.create(mc, TrainConfig(batch_size=8, lr=1e-3), seed=0)
    X = np.broadcast_to(seq, (8, seq.size))
    M = np.broadcast_to(mask, X.shape)
    for _ in range(500):
        tr.step(X, M)
    # held-out noise across the whole time range
    t = np.linspace(0.0, 1.0, 8)
    z0 = sample_uniform(32, np.random.default_rng(9), X.shape)
    alpha = tr.state.schedule.alpha(t)
    _, per_seq, _ = loss_and_grads(tr.model, tr.state.params, tr.state.codebook, X, M, (~M).astype(float), t, alpha, z0)
    assert per_seq.mean() / (~mask).sum() < 0.01


def test_copy_task_loss_decreases():
    rng = np.random.default_rng(0)
    x, mask = copy_task(8, 6, rng, 256)
    mc = DenoiserConfig("standard", dim=16, n_layers=1, n_heads=2, cond_dim=16, vocab_size=6)
    tr = Trainer.create(mc, TrainConfig(batch_size=8, lr=3e-3), seed=1)
    tr.fit(x, mask, steps=1000)
    losses = np.array([row[2] for row in tr.state.history])
    assert np.median(losses[900:1000]) < np.median(losses[0:100])


class TestCheckpoint:
    def test_same_state_same_bytes(self, rng, tmp_path):
        tr = small_trainer(refit=RefitParams(refit_interval=5, warmup=5))
        x, mask = toy_data(rng)
        tr.fit(x, mask, steps=12)
        tr.save(tmp_path / "a.zip")
        tr.save(tmp_path / "b.zip")
        assert (tmp_path / "a.zip").read_bytes() == (tmp_path / "b.zip").read_bytes()

    def test_roundtrip_and_resume_bitwise(self, rng, tmp_path):
        x, mask = toy_data(rng)
        rp = RefitParams(refit_interval=4, warmup=4, grid_size=4, min_points_per_grid=4)
        full = small_trainer(seed=2, refit=rp)
        full.fit(x, mask, steps=16)

        part = small_trainer(seed=2, refit=rp)
        part.fit(x, mask, steps=9)
        part.save(tmp_path / "ck.zip")
        resumed = load_checkpoint(tmp_path / "ck.zip")
        assert resumed.state.step == 9
        for k, v in part.state.trainable().items():
            np.testing.assert_array_equal(resumed.state.trainable()[k], v)
        resumed.fit(x, mask, steps=7)

        for k, v in full.state.trainable().items():
            np.testing.assert_array_equal(resumed.state.trainable()[k], v)
            np.testing.assert_array_equal(resumed.state.ema[k], full.state.ema[k])
        assert resumed.state.schedule == full.state.schedule
        assert resumed.state.buffer.entries == full.state.buffer.entries

    def test_not_a_zip(self, tmp_path):
        p = tmp_path / "junk.zip"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(p)

    def test_wrong_version(self, rng, tmp_path):
        import json
        import zipfile

        tr = small_trainer()
        tr.save(tmp_path / "a.zip")
        with zipfile.ZipFile(tmp_path / "a.zip") as src, zipfile.ZipFile(tmp_path / "b.zip", "w") as dst:
            for item in src.infolist():
                data = src.read(item)
                if item.filename == "manifest.json":
                    m = json.loads(data)
                    m["version"] = 99
                    data = json.dumps(m)
                dst.writestr(item, data)
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(tmp_path / "b.zip")
