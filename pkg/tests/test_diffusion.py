import numpy as np
import pytest
import torch
from torch import nn

from functa.diffusion import (
    DenoiserConfig,
    DiffusionConfig,
    ResidualDenoiser,
    TimestepDist,
    ddpm_sample,
    ddpm_train_step,
    diffuse_train,
    evaluate_generation,
    guided_noise,
    load_diffusion,
    make_schedule,
    q_sample,
    sample_latents,
    sample_timesteps,
    save_diffusion,
)
from functa.functaset import Functaset
from functa.meta import DivergenceError


class OracleNoise(nn.Module):
    """Returns the exact noise for data concentrated at ``z0``."""

    def __init__(self, schedule, z0):
        super().__init__()
        self.ab = torch.as_tensor(schedule.alpha_bars)
        self.z0 = torch.as_tensor(z0, dtype=torch.float64)
        self.dummy_label = 0

    def forward(self, x, t, y):
        ab = self.ab[t][:, None]
        return (x.double() - ab.sqrt() * self.z0) / (1 - ab).sqrt()


class ConstantPerLabel(nn.Module):
    def __init__(self, dim, classes):
        super().__init__()
        self.table = torch.arange((classes + 1) * dim, dtype=torch.float32).reshape(classes + 1, dim) / 7.0
        self.dummy_label = classes

    def forward(self, x, t, y):
        return self.table[y] + 0 * x


class TestSchedules:
    @pytest.mark.parametrize("kind", ["linear", "cosine"])
    def test_monotone(self, kind):
        s = make_schedule(kind, 200)
        assert s.alpha_bars[0] == 1.0 and s.betas[0] == 0.0
        assert np.all(np.diff(s.alpha_bars) < 0)
        assert len(s.betas) == 201
        assert np.all((s.betas[1:] > 0) & (s.betas[1:] < 1))

    def test_linear_endpoints(self):
        s = make_schedule("linear", 1000)
        assert s.betas[1] == pytest.approx(1e-4) and s.betas[1000] == pytest.approx(0.02)

    def test_cosine_ends_near_zero(self):
        assert make_schedule("cosine", 1000).alpha_bars[-1] < 1e-4

    def test_errors(self):
        with pytest.raises(ValueError):
            make_schedule("sigmoid", 10)
        with pytest.raises(ValueError):
            make_schedule("linear", 0)


class TestForwardProcess:
    def test_limits(self, rng):
        s = make_schedule("cosine", 100)
        z0, eps = rng.normal(size=(2, 5, 4))
        assert np.array_equal(q_sample(z0, 0, eps, s), z0)
        np.testing.assert_allclose(q_sample(z0, 100, eps, s), eps, atol=1e-3 * np.abs(z0).max())

    def test_marginal_moments(self, rng):
        s = make_schedule("linear", 100)
        z0 = np.full((200000, 1), 2.0)
        zt = q_sample(z0, np.full(len(z0), 40), rng.standard_normal(z0.shape), s)
        ab = s.alpha_bars[40]
        assert zt.mean() == pytest.approx(np.sqrt(ab) * 2.0, abs=0.01)
        assert zt.var() == pytest.approx(1 - ab, rel=0.02)

    def test_per_row_timesteps(self, rng):
        s = make_schedule("linear", 10)
        z0, eps = rng.normal(size=(2, 3, 2))
        out = q_sample(z0, np.array([0, 5, 10]), eps, s)
        for i, t in enumerate([0, 5, 10]):
            np.testing.assert_allclose(out[i], q_sample(z0[i], t, eps[i], s))

    def test_errors(self, rng):
        s = make_schedule("linear", 10)
        with pytest.raises(ValueError):
            q_sample(np.zeros(3), 1, np.zeros(4), s)
        with pytest.raises(ValueError):
            q_sample(np.zeros(3), 11, np.zeros(3), s)


class TestTimesteps:
    def test_ratio_exact(self):
        p = TimestepDist(50, 3.0).probs
        assert p[0] / p[-1] == pytest.approx(3.0, rel=1e-12)
        assert p.sum() == pytest.approx(1.0, rel=1e-12)
        assert np.all(np.diff(p) < 0)

    def test_uniform_chi_square(self):
        t = sample_timesteps(TimestepDist(10, 1.0), 100000, seed=0)
        assert t.min() == 1 and t.max() == 10
        counts = np.bincount(t, minlength=11)[1:]
        chi2 = np.sum((counts - 10000) ** 2 / 10000)
        assert chi2 < 27.88  # 99.9% quantile at 9 degrees of freedom

    def test_reproducible(self):
        d = TimestepDist(20, 2.0)
        assert np.array_equal(sample_timesteps(d, 50, 3), sample_timesteps(d, 50, 3))

    def test_invalid(self):
        with pytest.raises(ValueError):
            TimestepDist(10, 0.5)


class TestTraining:
    def test_oracle_loss_zero(self, rng):
        s = make_schedule("cosine", 50)
        model = OracleNoise(s, np.zeros(6))
        loss = ddpm_train_step(model, None, np.zeros((64, 6)), None, s, TimestepDist(50, 3.0), 0.2, rng)
        assert loss < 1e-10

    def test_zero_output_loss_near_one(self, rng):
        torch.manual_seed(0)
        model = ResidualDenoiser(16, DenoiserConfig(width=32, blocks=1, time_dim=8, class_dim=8))
        s = make_schedule("cosine", 100)
        loss = ddpm_train_step(model, None, rng.normal(size=(4096, 16)), None, s, TimestepDist(100), 0.0, rng)
        assert loss == pytest.approx(1.0, abs=0.02)

    def test_all_dummy_leaves_class_rows(self, rng):
        torch.manual_seed(0)
        model = ResidualDenoiser(4, DenoiserConfig(width=16, blocks=1, time_dim=8, class_dim=8, num_classes=3))
        nn.init.normal_(model.out[-1].weight)
        s = make_schedule("cosine", 20)
        opt = torch.optim.SGD(model.parameters(), lr=0.0)
        ddpm_train_step(model, opt, rng.normal(size=(32, 4)), rng.integers(0, 3, 32), s, TimestepDist(20), 1.0, rng)
        grad = model.label[0].weight.grad
        assert torch.all(grad[:3] == 0)
        assert torch.any(grad[3] != 0)

    def test_nonfinite_raises(self, rng):
        model = ResidualDenoiser(4, DenoiserConfig(width=8, blocks=1, time_dim=4, class_dim=4))
        s = make_schedule("cosine", 10)
        with pytest.raises(DivergenceError):
            ddpm_train_step(model, None, np.full((2, 4), np.nan), None, s, TimestepDist(10), 0.0, rng)


class TestGuidance:
    def test_endpoints_exact(self, rng):
        model = ConstantPerLabel(3, 4)
        x = rng.normal(size=(5, 3))
        for g, pick in ((0.0, 1), (1.0, 2)):
            out = guided_noise(model, x, 3, 2, g, 4)
            assert np.array_equal(out[0], out[pick])

    def test_linear_in_guidance(self, rng):
        model = ConstantPerLabel(3, 4)
        x = rng.normal(size=(2, 3))
        eps, u, c = guided_noise(model, x, 3, 1, 2.5, 4)
        np.testing.assert_allclose(eps, u + 2.5 * (c - u), rtol=1e-12)

    def test_unconditional_uses_dummy(self, rng):
        model = ConstantPerLabel(3, 4)
        eps, u, c = guided_noise(model, rng.normal(size=(2, 3)), 1, None, 3.0, 4)
        assert c is None and np.array_equal(eps, u)
        np.testing.assert_allclose(u[0], model.table[4].numpy())


class TestSampling:
    def test_single_step_inverts_oracle(self, rng):
        s = make_schedule("linear", 1)
        z0 = rng.normal(size=5)
        x_T = rng.normal(size=(3, 5))
        out = ddpm_sample(OracleNoise(s, z0), s, 3, 5, x_T=x_T, model_dtype=torch.float64)
        np.testing.assert_allclose(out, np.broadcast_to(z0, (3, 5)), rtol=1e-12, atol=1e-12)

    def test_oracle_converges_to_point(self, rng):
        s = make_schedule("cosine", 100)
        z0 = rng.normal(size=4)
        out = ddpm_sample(OracleNoise(s, z0), s, 50, 4, seed=1, model_dtype=torch.float64)
        np.testing.assert_allclose(out, np.broadcast_to(z0, out.shape), atol=1e-6)

    def test_loose_clip_matches_noise_form(self):
        torch.manual_seed(0)
        model = ResidualDenoiser(4, DenoiserConfig(width=8, blocks=1, time_dim=4, class_dim=4))
        nn.init.normal_(model.out[-1].weight, std=0.1)
        s = make_schedule("linear", 20)
        a = ddpm_sample(model, s, 6, 4, seed=3)
        b = ddpm_sample(model, s, 6, 4, seed=3, clip_denoised=1e9)
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9)

    def test_clip_bounds_cosine_tail(self, rng):
        s = make_schedule("cosine", 50)
        z0 = np.full(4, 0.5)
        biased = OracleNoise(s, z0)
        out = ddpm_sample(lambda x, t, y: biased(x, t, y) + 0.1, s, 20, 4, seed=0, dummy_label=0,
                          model_dtype=torch.float64, clip_denoised=3.0)
        assert np.all(np.abs(out) <= 3.5)

    def test_clip_must_be_positive(self):
        s = make_schedule("linear", 2)
        with pytest.raises(ValueError):
            ddpm_sample(OracleNoise(s, np.zeros(2)), s, 1, 2, clip_denoised=0.0)

    def test_deterministic(self):
        torch.manual_seed(0)
        model = ResidualDenoiser(4, DenoiserConfig(width=8, blocks=1, time_dim=4, class_dim=4, num_classes=2))
        nn.init.normal_(model.out[-1].weight, std=0.1)
        s = make_schedule("cosine", 10)
        a = ddpm_sample(model, s, 3, 4, label=1, guidance=2.0, seed=5)
        b = ddpm_sample(model, s, 3, 4, label=1, guidance=2.0, seed=5)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, ddpm_sample(model, s, 3, 4, label=1, guidance=2.0, seed=6))


class TestEndToEnd:
    @pytest.fixture
    def fs(self, rng):
        return Functaset((2, 2, 2), rng.normal(1.0, 2.0, (64, 2, 2, 2)).astype(np.float32), labels=rng.integers(0, 2, 64))

    def test_train_sample_save_load(self, fs, tmp_path):
        dcfg = DenoiserConfig(width=16, blocks=1, time_dim=8, class_dim=8, num_classes=2)
        cfg = DiffusionConfig(T=20, iterations=5, batch_size=16, lr=1e-3)
        dm = diffuse_train(fs, dcfg, cfg)
        assert len(dm.history) == 5
        samples = sample_latents(dm, 4, label=1, guidance=1.5, seed=2)
        assert samples.shape == (4, 2, 2, 2)
        save_diffusion(dm, tmp_path / "d.pt")
        back = load_diffusion(tmp_path / "d.pt")
        assert np.array_equal(sample_latents(back, 4, label=1, guidance=1.5, seed=2), samples)
        assert back.config == cfg and back.latent_shape == (2, 2, 2)

    def test_ema_shadow_differs_from_raw(self, fs):
        dcfg = DenoiserConfig(width=8, blocks=1, time_dim=4, class_dim=4)
        raw = diffuse_train(fs, dcfg, DiffusionConfig(T=10, iterations=30, batch_size=8, lr=1e-2, ema_decay=0.0))
        ema = diffuse_train(fs, dcfg, DiffusionConfig(T=10, iterations=30, batch_size=8, lr=1e-2, ema_decay=0.9))
        assert raw.history == ema.history
        w_raw, w_ema = raw.model.out[-1].weight, ema.model.out[-1].weight
        assert not torch.equal(w_raw, w_ema)
        assert not w_ema.requires_grad

    def test_reproducible(self, fs):
        dcfg = DenoiserConfig(width=16, blocks=1, time_dim=8, class_dim=8)
        cfg = DiffusionConfig(T=10, iterations=3, batch_size=8)
        a, b = diffuse_train(fs, dcfg, cfg), diffuse_train(fs, dcfg, cfg)
        assert a.history == b.history

    def test_callback_stops(self, fs):
        dcfg = DenoiserConfig(width=8, blocks=1, time_dim=4, class_dim=4)
        dm = diffuse_train(fs, dcfg, DiffusionConfig(T=10, iterations=50, batch_size=4), callback=lambda it, loss: it == 2)
        assert len(dm.history) == 2

    def test_label_range(self, fs):
        with pytest.raises(ValueError):
            diffuse_train(fs, DenoiserConfig(width=8, blocks=1, num_classes=1), DiffusionConfig(T=5, iterations=1))


class TestGenerationReport:
    def test_identical_sets(self, rng):
        ref = rng.normal(size=(100, 3))
        rep = evaluate_generation(ref, ref)
        assert rep.mean_distance == 0 and rep.cov_rel_frobenius == 0 and rep.cov_trace_ratio == 1

    def test_shift_and_scale(self, rng):
        ref = rng.normal(size=(100, 3))
        rep = evaluate_generation(2 * ref + [1, 0, 0], ref)
        np.testing.assert_allclose(rep.mean_shift, ref.mean(0) + [1, 0, 0], atol=1e-12)
        assert rep.cov_trace_ratio == pytest.approx(4.0)

    def test_audit_attached(self, rng):
        imgs = rng.uniform(size=(5, 4, 4, 3))
        rep = evaluate_generation(rng.normal(size=(5, 2)), rng.normal(size=(5, 2)), imgs, imgs)
        assert rep.audit.unique_count == 5

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_generation(np.zeros((0, 2)), np.zeros((3, 2)))
