import numpy as np
import pytest
import torch

from syncast.diffusion import (
    Climatology,
    Denoiser,
    DiffusionConfig,
    NoiseSchedule,
    build_climatology,
    build_conditioning,
    climatology_gate,
    conditioning_channels,
    denoise_ensemble_mean,
    denoise_sample,
    forward_noise,
    sample_step_indices,
    train_dee,
)
from syncast.errors import (
    InsufficientDataError,
    InvalidConfigError,
    SamplingFailureError,
    ShapeError,
)
from conftest import random_state


@pytest.fixture
def dcfg():
    return DiffusionConfig().validate()


class TestSchedule:
    def test_linear_betas(self, dcfg):
        s = NoiseSchedule(dcfg)
        assert s.betas[0] == pytest.approx(1e-4)
        assert s.betas[-1] == pytest.approx(2e-2)
        assert len(s.betas) == 1000

    def test_alpha_bar_monotone(self, dcfg):
        s = NoiseSchedule(dcfg)
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert 0 < s.alpha_bar[-1] < s.alpha_bar[0] < 1

    def test_alpha_bar_indexing(self, dcfg):
        s = NoiseSchedule(dcfg)
        assert s.alpha_bar_at(0) == 1.0
        assert s.alpha_bar_at(1) == pytest.approx(1 - 1e-4)
        with pytest.raises(IndexError):
            s.alpha_bar_at(1001)

    def test_invalid_betas(self):
        with pytest.raises(InvalidConfigError):
            DiffusionConfig(beta_start=0.5, beta_end=0.1).validate()
        with pytest.raises(InvalidConfigError):
            DiffusionConfig(n_sample_steps=2000).validate()


class TestForwardNoise:
    def test_formula(self, dcfg):
        s = NoiseSchedule(dcfg)
        x0 = np.ones((4, 4, 3))
        xi, eps = forward_noise(x0, 500, s, np.random.default_rng(0))
        ab = s.alpha_bar_at(500)
        assert np.allclose(xi, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)

    def test_small_step_stays_close(self, dcfg):
        s = NoiseSchedule(dcfg)
        x0 = np.zeros((16, 16, 3))
        xi, eps = forward_noise(x0, 1, s, np.random.default_rng(1))
        assert np.max(np.abs(xi)) <= np.sqrt(1 - s.alpha_bar_at(1)) * \
            np.max(np.abs(eps)) + 1e-12

    def test_seeded_determinism(self, dcfg):
        s = NoiseSchedule(dcfg)
        x0 = np.ones((4, 4, 3))
        a = forward_noise(x0, 100, s, np.random.default_rng(7))
        b = forward_noise(x0, 100, s, np.random.default_rng(7))
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_step_range(self, dcfg):
        s = NoiseSchedule(dcfg)
        with pytest.raises(IndexError):
            forward_noise(np.zeros((2, 2, 3)), 0, s, np.random.default_rng(0))


class TestConditioning:
    def test_layout_and_channels(self, grid8):
        s = random_state(grid8, n_levels=2)
        c = build_conditioning(s)
        assert c.shape == (8, 8, conditioning_channels(2))
        assert np.allclose(c[:, :, :3], s.surface[:, :, 4:])
        assert np.allclose(c[:, :, 3:10], s.surface)


class TestSampling:
    def test_step_indices_descending_strided(self, dcfg):
        idx = sample_step_indices(dcfg)
        assert idx[0] == 1000 and idx[-1] == 1
        assert len(idx) == 50
        assert all(a > b for a, b in zip(idx, idx[1:]))

    def test_zero_noise_closed_form(self, grid8):
        # a denoiser that always predicts zero noise must return the pure
        # drift trajectory x0 = x_N / sqrt(abar_N) when sampling all N steps
        cfg = DiffusionConfig(n_train_steps=50, n_sample_steps=50).validate()
        sch = NoiseSchedule(cfg)
        cond = np.zeros((8, 8, conditioning_channels(2)), dtype=np.float32)
        out = denoise_sample(cond, lambda x, c, i: torch.zeros_like(x), cfg,
                             seed=5, stochastic=False)
        g = torch.Generator().manual_seed(5)
        x_init = torch.randn((1, 3, 8, 8), generator=g)[0].permute(1, 2, 0)
        expect = x_init.numpy() / np.sqrt(sch.alpha_bar_at(50))
        assert np.max(np.abs(out - expect)) <= 1e-4 * np.abs(expect).max()

    def test_seeded_determinism(self, dcfg):
        torch.manual_seed(0)
        model = Denoiser(conditioning_channels(2), hidden=8)
        cond = np.random.default_rng(0).normal(
            size=(8, 8, conditioning_channels(2))).astype(np.float32)
        a = denoise_sample(cond, model, dcfg, seed=3)
        b = denoise_sample(cond, model, dcfg, seed=3)
        assert np.array_equal(a, b)
        c = denoise_sample(cond, model, dcfg, seed=4)
        assert not np.array_equal(a, c)

    def test_nonfinite_prediction_raises(self, dcfg):
        cond = np.zeros((4, 4, conditioning_channels(2)), dtype=np.float32)
        bad = lambda x, c, i: torch.full_like(x, float("nan"))
        with pytest.raises(SamplingFailureError):
            denoise_sample(cond, bad, dcfg, seed=0)

    def test_ensemble_mean_deterministic(self, dcfg):
        torch.manual_seed(1)
        model = Denoiser(conditioning_channels(2), hidden=8)
        cond = np.zeros((4, 4, conditioning_channels(2)), dtype=np.float32)
        a = denoise_ensemble_mean(cond, model, dcfg, seed=0, n_members=3)
        b = denoise_ensemble_mean(cond, model, dcfg, seed=0, n_members=3)
        assert np.array_equal(a, b)


class TestTrainDee:
    def test_loss_decreases_and_deterministic(self):
        rng = np.random.default_rng(0)
        cc = conditioning_channels(2)
        pairs = [(rng.normal(size=(8, 8, cc)).astype(np.float32),
                  rng.normal(size=(8, 8, 3)).astype(np.float32))
                 for _ in range(4)]
        cfg = DiffusionConfig(n_train_steps=8, beta_start=0.05, beta_end=0.95,
                              n_sample_steps=8, learning_rate=1e-3,
                              epochs=30, batch_size=4, hidden=8,
                              seed=0).validate()
        _, h1 = train_dee(pairs, cfg, 2)
        _, h2 = train_dee(pairs, cfg, 2)
        assert h1 == h2
        assert np.mean(h1[-5:]) < np.mean(h1[:5])

    def test_conditioning_channel_mismatch(self):
        pairs = [(np.zeros((4, 4, 9), dtype=np.float32),
                  np.zeros((4, 4, 3), dtype=np.float32))]
        with pytest.raises(ShapeError):
            train_dee(pairs, DiffusionConfig(epochs=1), n_levels=2)

    def test_empty_pairs(self):
        with pytest.raises(InvalidConfigError):
            train_dee([], DiffusionConfig(), n_levels=2)


class TestClimatology:
    def make_states(self, grid8, n=48):
        return [random_state(grid8, seed=k, timestamp=k) for k in range(n)]

    def test_bucket_shapes_and_values(self, grid8):
        states = self.make_states(grid8)
        clim = build_climatology(states, 24, 4)
        assert clim.thresholds.shape == (4, 8, 8, 3)
        assert clim.spread.shape == (4, 8, 8, 3)
        # bucket 0 holds hours {0..5} mod 24
        member_pm = np.stack([s.surface[:, :, 4:] for s in states
                              if (s.timestamp % 24) // 6 == 0])
        assert np.allclose(clim.thresholds[0], member_pm.mean(axis=0))
        assert np.allclose(clim.spread[0], member_pm.std(axis=0))

    def test_bucket_of(self, grid8):
        clim = build_climatology(self.make_states(grid8), 24, 4)
        assert clim.bucket_of(0) == 0
        assert clim.bucket_of(6) == 1
        assert clim.bucket_of(23) == 3
        assert clim.bucket_of(25) == 0

    def test_too_short_sequence(self, grid8):
        with pytest.raises(InsufficientDataError):
            build_climatology(self.make_states(grid8, 10), 24, 4)

    def test_empty_bucket_named(self, grid8):
        states = [random_state(grid8, seed=k, timestamp=24 * k)
                  for k in range(3)]
        with pytest.raises(InsufficientDataError) as e:
            build_climatology(states, 24, 4)
        assert "bucket" in str(e.value)

    def test_period_bucket_divisibility(self, grid8):
        with pytest.raises(InvalidConfigError):
            build_climatology(self.make_states(grid8), 24, 5)


class TestGate:
    def make_clim(self, grid8):
        return build_climatology(
            [random_state(grid8, seed=k, timestamp=k) for k in range(48)],
            24, 4)

    def test_gate_replaces_only_exceedances(self, grid8):
        clim = self.make_clim(grid8)
        b = clim.bucket_of(3)
        pred = clim.thresholds[b].copy()
        pred[0, 0] = clim.thresholds[b][0, 0] + 10 * clim.spread[b][0, 0] + 1e-9
        refined = np.full_like(pred, 7.0)
        final, mask = climatology_gate(pred, refined, clim, 3, delta=1.0)
        assert mask[0, 0].all()
        assert np.all(final[0, 0] == 7.0)
        assert np.array_equal(final[1:], pred[1:])

    def test_no_exceedance_bit_equal(self, grid8):
        clim = self.make_clim(grid8)
        pred = np.zeros((8, 8, 3))
        refined = np.ones((8, 8, 3))
        final, mask = climatology_gate(pred, refined, clim, 0, delta=1.0)
        assert not mask.any()
        assert np.array_equal(final, pred)

    def test_delta_infinite_never_fires(self, grid8):
        clim = self.make_clim(grid8)
        pred = np.full((8, 8, 3), 1e6)
        refined = np.zeros((8, 8, 3))
        final, mask = climatology_gate(pred, refined, clim, 0, delta=np.inf)
        assert not mask.any()
        assert np.array_equal(final, pred)

    def test_monotone_in_delta(self, grid8):
        clim = self.make_clim(grid8)
        rng = np.random.default_rng(5)
        pred = np.abs(rng.normal(size=(8, 8, 3))) * 1e-8
        refined = np.zeros((8, 8, 3))
        counts = [climatology_gate(pred, refined, clim, 0, delta=d)[1].sum()
                  for d in (0.0, 0.5, 1.0, 2.0, np.inf)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_shape_mismatch(self, grid8):
        clim = self.make_clim(grid8)
        with pytest.raises(ShapeError):
            climatology_gate(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), clim, 0)
