import math

import numpy as np
import pytest

from ddae.schedule import (
    NoiseSchedule,
    forward_noise,
    make_linear_schedule,
    sample_timesteps,
)


def brute_force_alpha_bar(T, beta_start, beta_end, t):
    betas = np.linspace(beta_start, beta_end, T)
    prod = 1.0
    for s in range(t):
        prod *= 1.0 - betas[s]
    return prod


class TestMakeLinearSchedule:
    def test_first_alpha_bar_is_one_minus_beta1(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        assert s.alpha_bar(1) == pytest.approx(0.9999, abs=1e-15)

    def test_terminal_alpha_bar_matches_brute_force_product(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        oracle = brute_force_alpha_bar(1000, 1e-4, 0.02, 1000)
        assert s.alpha_bar(1000) == pytest.approx(oracle, rel=1e-12)
        # frozen from the oracle above
        assert s.alpha_bar(1000) == pytest.approx(4.035829765375676e-05, rel=1e-9)

    def test_single_step_degenerate(self):
        s = make_linear_schedule(1, 0.5, 0.5)
        assert s.betas.tolist() == [0.5]
        assert s.alpha_bars.tolist() == [0.5]

    def test_intermediate_values_match_brute_force(self):
        s = make_linear_schedule(200, 1e-4, 0.05)
        for t in (1, 57, 100, 200):
            assert s.alpha_bar(t) == pytest.approx(
                brute_force_alpha_bar(200, 1e-4, 0.05, t), rel=1e-12
            )

    @pytest.mark.parametrize("T", [0, -3])
    def test_rejects_non_positive_T(self, T):
        with pytest.raises(ValueError):
            make_linear_schedule(T, 1e-4, 0.02)

    @pytest.mark.parametrize("bs,be", [(0.0, 0.02), (-0.1, 0.02), (1e-4, 1.0), (0.5, 1.5), (0.02, 1e-4)])
    def test_rejects_invalid_betas(self, bs, be):
        with pytest.raises(ValueError):
            make_linear_schedule(100, bs, be)


class TestScheduleInvariants:
    @pytest.mark.parametrize("T,bs,be", [(1000, 1e-4, 0.02), (200, 1e-4, 0.05), (10, 0.3, 0.9)])
    def test_monotone(self, T, bs, be):
        s = make_linear_schedule(T, bs, be)
        assert np.all(np.diff(s.alpha_bars) < 0)
        sigma = np.sqrt(1.0 - s.alpha_bars)
        assert np.all(np.diff(sigma) > 0)

    def test_recurrence_relation(self):
        s = make_linear_schedule(500, 1e-4, 0.02)
        assert s.alpha_bar(1) == 1.0 - s.betas[0]
        for t in (2, 250, 500):
            expected = s.alpha_bar(t - 1) * (1.0 - s.betas[t - 1])
            assert abs(s.alpha_bar(t) - expected) / expected < 1e-12

    def test_terminal_noise_property_default_schedule(self):
        s = make_linear_schedule(1000, 1e-4, 0.02)
        ab_T = s.alpha_bar(1000)
        assert ab_T < 1e-4
        # x_T = sqrt(ab_T) x0 + sqrt(1-ab_T) eps for x0 in [-1, 1]:
        # per-element mean within sqrt(ab_T) of 0, variance within ab_T of 1
        assert math.sqrt(ab_T) * 1.0 < 0.02
        assert abs((1.0 - ab_T) - 1.0) < 0.02

    def test_constructor_rejects_inconsistent_alpha_bars(self):
        betas = np.linspace(1e-4, 0.02, 50)
        bad = np.cumprod(1.0 - betas) * 1.001
        with pytest.raises(ValueError):
            NoiseSchedule(betas=betas, alpha_bars=bad)

    def test_constructor_rejects_non_decreasing_alpha_bars(self):
        with pytest.raises(ValueError):
            NoiseSchedule(betas=np.array([0.1, 0.1]), alpha_bars=np.array([0.9, 0.9]))

    def test_alpha_bar_zero_is_one_and_range_checked(self):
        s = make_linear_schedule(10, 0.1, 0.2)
        assert s.alpha_bar(0) == 1.0
        with pytest.raises(ValueError):
            s.alpha_bar(11)


class TestForwardNoise:
    def test_zero_noise_scales_signal(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        x0 = np.linspace(0, 1, 16).reshape(4, 4)
        for t in (1, 50, 100):
            out = forward_noise(x0, t, np.zeros_like(x0), s)
            np.testing.assert_allclose(out.x_t, math.sqrt(s.alpha_bar(t)) * x0, rtol=1e-14)

    def test_zero_signal_scales_noise(self):
        s = make_linear_schedule(100, 1e-4, 0.02)
        eps = np.random.default_rng(0).normal(size=(4, 4))
        out = forward_noise(np.zeros((4, 4)), 60, eps, s)
        np.testing.assert_allclose(out.x_t, math.sqrt(1 - s.alpha_bar(60)) * eps, rtol=1e-14)

    def test_rejects_t_out_of_range(self):
        s = make_linear_schedule(10, 0.1, 0.2)
        x = np.zeros((2, 2))
        for t in (0, 11):
            with pytest.raises(ValueError):
                forward_noise(x, t, x, s)

    def test_rejects_shape_mismatch(self):
        s = make_linear_schedule(10, 0.1, 0.2)
        with pytest.raises(ValueError):
            forward_noise(np.zeros((2, 2)), 1, np.zeros((3, 3)), s)

    def test_rejects_non_finite_x0(self):
        s = make_linear_schedule(10, 0.1, 0.2)
        x = np.full((2, 2), np.nan)
        with pytest.raises(ValueError):
            forward_noise(x, 1, np.zeros((2, 2)), s)

    @pytest.mark.parametrize("t_frac", [0.005, 0.5, 1.0])
    def test_closed_form_matches_iterated_markov_kernel(self, t_frac):
        # Monte-Carlo oracle: iterate x_t = sqrt(1-b_t) x_{t-1} + sqrt(b_t) e_t
        # many times, then check the population moments agree with the
        # coefficients the closed form uses.  Centering by the closed-form
        # mean pools all pixels into one large sample, keeping MC error small.
        T = 200
        s = make_linear_schedule(T, 1e-4, 0.05)
        t = max(1, round(t_frac * T))
        rng = np.random.default_rng(12345)
        x0 = rng.uniform(-1, 1, size=(4, 4))
        n = 20_000

        x_iter = np.broadcast_to(x0, (n, 4, 4)).copy()
        for step in range(1, t + 1):
            b = s.betas[step - 1]
            x_iter = math.sqrt(1 - b) * x_iter + math.sqrt(b) * rng.normal(size=(n, 4, 4))

        closed_mean = forward_noise(x0, t, np.zeros_like(x0), s).x_t
        resid = x_iter - closed_mean
        ab = s.alpha_bar(t)
        assert resid.mean() == pytest.approx(0.0, abs=4 * math.sqrt((1 - ab) / resid.size))
        assert resid.var() == pytest.approx(1 - ab, rel=0.05, abs=1e-4)


class TestSampleTimesteps:
    def test_single_timestep(self):
        assert sample_timesteps(4, 1, 0).tolist() == [1, 1, 1, 1]

    def test_uniform_frequencies(self):
        ts = sample_timesteps(100_000, 10, np.random.default_rng(7))
        freqs = np.bincount(ts, minlength=11)[1:] / 100_000
        assert np.all(freqs >= 0.09) and np.all(freqs <= 0.11)

    def test_seed_determinism(self):
        a = sample_timesteps(64, 50, 99)
        b = sample_timesteps(64, 50, 99)
        assert a.tolist() == b.tolist()

    def test_range(self):
        ts = sample_timesteps(1000, 7, 3)
        assert ts.min() >= 1 and ts.max() <= 7

    def test_rejects_bad_batch(self):
        with pytest.raises(ValueError):
            sample_timesteps(0, 10, 0)
