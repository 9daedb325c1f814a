import numpy as np
import pytest

from distillvc.errors import ContractError, ParameterError
from distillvc.schedule import (
    NoiseSchedule,
    build_cosine_schedule,
    build_subsequence,
    denoise_mean,
    forward_diffuse,
    one_step_diffuse,
    posterior_sigma,
    reverse_step,
)


def closed_form_abar(t, T, offset):
    # independent oracle: abar_t = f(t)/f(0), evaluated directly, no tables
    f = lambda u: np.cos((u / T + offset) / (1 + offset) * np.pi / 2) ** 2
    return f(np.float64(t)) / f(np.float64(0))


def toy_schedule():
    # hand-buildable tables: alpha = [0.8, 0.8], abar = [1, 0.8, 0.64]
    alpha = np.array([0.8, 0.8])
    return NoiseSchedule(T=2, offset=0.008, beta=1 - alpha, alpha=alpha,
                         alpha_bar=np.array([1.0, 0.8, 0.64]))


class TestBuildCosineSchedule:
    def test_abar_zero_is_one(self):
        sched = build_cosine_schedule(1000, 0.008)
        assert sched.alpha_bar[0] == 1.0

    def test_abar_final_below_threshold(self):
        # oracle evaluated before building
        assert closed_form_abar(1000, 1000, 0.008) < 1e-3
        sched = build_cosine_schedule(1000, 0.008)
        assert sched.alpha_bar[1000] < 1e-3

    def test_tables_track_closed_form_before_clipping(self):
        sched = build_cosine_schedule(1000, 0.008)
        t = np.arange(0, 990)  # clipping only bites near t = T
        assert np.allclose(sched.alpha_bar[t], closed_form_abar(t, 1000, 0.008), rtol=1e-9)

    def test_tiny_schedule_clipped_and_monotone(self):
        sched = build_cosine_schedule(4, 0.008)
        assert np.all(sched.beta > 0) and np.all(sched.beta <= 0.999)
        assert np.all(np.diff(sched.alpha_bar) < 0)

    def test_invariants(self):
        sched = build_cosine_schedule(1000, 0.008)
        assert np.all(sched.alpha_bar > 0) and np.all(sched.alpha_bar <= 1)
        # abar_t = abar_{t-1} * alpha_t to 64-bit rounding (cumprod is sequential)
        assert np.array_equal(sched.alpha_bar[1:], np.concatenate([[1.0], np.cumprod(sched.alpha)[:-1]]) * sched.alpha)

    def test_parameter_errors(self):
        with pytest.raises(ParameterError):
            build_cosine_schedule(0, 0.008)
        with pytest.raises(ParameterError):
            build_cosine_schedule(1000, 0.0)


class TestForwardDiffuse:
    def test_zero_noise(self):
        sched = build_cosine_schedule(100, 0.008)
        x0 = np.ones((3, 4))
        out = forward_diffuse(x0, 50, np.zeros_like(x0), sched)
        assert np.allclose(out, np.sqrt(sched.alpha_bar[50]) * x0)

    def test_zero_signal(self):
        sched = build_cosine_schedule(100, 0.008)
        eps = np.full((2, 5), 0.7)
        out = forward_diffuse(np.zeros_like(eps), 50, eps, sched)
        assert np.allclose(out, np.sqrt(1 - sched.alpha_bar[50]) * eps)

    def test_scalar_case_abar_064(self):
        out = forward_diffuse(np.array(1.0), 2, np.array(0.5), toy_schedule())
        assert abs(out - 1.1) < 1e-12  # 0.8*1.0 + 0.6*0.5

    def test_per_example_t(self):
        sched = build_cosine_schedule(200, 0.008)
        rng = np.random.default_rng(0)
        x0 = rng.standard_normal((4, 8, 3))
        eps = rng.standard_normal((4, 8, 3))
        t = np.array([1, 50, 120, 200])
        batched = forward_diffuse(x0, t, eps, sched)
        for i, ti in enumerate(t):
            assert np.array_equal(batched[i], forward_diffuse(x0[i], int(ti), eps[i], sched))

    def test_errors(self):
        sched = build_cosine_schedule(10, 0.008)
        with pytest.raises(ParameterError):
            forward_diffuse(np.zeros(3), 1, np.zeros(4), sched)
        with pytest.raises(ParameterError):
            forward_diffuse(np.zeros(3), 11, np.zeros(3), sched)
        with pytest.raises(ParameterError):
            forward_diffuse(np.zeros(3), 0, np.zeros(3), sched)


class TestOneStepDiffuse:
    def test_zero_z(self):
        sched = toy_schedule()
        x = np.array([1.0, -2.0])
        assert np.allclose(one_step_diffuse(x, 1, np.zeros(2), sched), np.sqrt(0.8) * x)

    def test_small_beta_limit(self):
        alpha = np.array([1 - 1e-12])
        sched = NoiseSchedule(T=1, offset=0.0, beta=1 - alpha, alpha=alpha,
                              alpha_bar=np.array([1.0, alpha[0]]))
        x = np.array([3.0])
        out = one_step_diffuse(x, 1, np.array([1.0]), sched)
        assert abs(out[0] - 3.0) < 1e-5

    def test_chained_moments_match_closed_form(self):
        # Monte-Carlo: iterate the one-step kernel to t*, compare moments with
        # the closed form within 3 standard errors.
        sched = build_cosine_schedule(1000, 0.008)
        t_star, n = 137, 10_000
        rng = np.random.default_rng(11)
        x0 = 1.37
        x = np.full(n, x0)
        for t in range(1, t_star + 1):
            x = one_step_diffuse(x, t, rng.standard_normal(n), sched)
        abar = sched.alpha_bar[t_star]
        mean_true, var_true = np.sqrt(abar) * x0, 1 - abar
        se_mean = np.sqrt(var_true / n)
        se_var = var_true * np.sqrt(2 / (n - 1))
        assert abs(x.mean() - mean_true) < 3 * se_mean
        assert abs(x.var() - var_true) < 3 * se_var


class TestPosteriorSigma:
    def test_sigma_one_is_zero(self):
        assert posterior_sigma(1, build_cosine_schedule(100, 0.008)) == 0.0

    def test_sigma_squared_below_beta(self):
        sched = build_cosine_schedule(1000, 0.008)
        t = np.arange(1, 1001)
        assert np.all(posterior_sigma(t, sched) ** 2 <= sched.beta + 1e-15)

    def test_hand_evaluation_t4(self):
        sched = build_cosine_schedule(4, 0.008)
        beta4 = sched.beta[3]
        hand = np.sqrt((1 - sched.alpha_bar[3]) / (1 - sched.alpha_bar[4]) * beta4)
        assert posterior_sigma(4, sched) == pytest.approx(hand, rel=1e-15)

    def test_out_of_range(self):
        sched = build_cosine_schedule(4, 0.008)
        with pytest.raises(ParameterError):
            posterior_sigma(5, sched)


class TestBuildSubsequence:
    def test_single_step(self):
        sched = build_cosine_schedule(1000, 0.008)
        sub = build_subsequence(1, (950, 950), "linear", sched)
        assert sub.steps.tolist() == [950]
        assert sub.alpha_sub[0] == sched.alpha_bar[950]
        assert sub.sigma_sub[0] == 0.0

    def test_single_step_wide_endpoints_uses_sk(self):
        sched = build_cosine_schedule(1000, 0.008)
        sub = build_subsequence(1, (50, 950), "linear", sched)
        assert sub.steps.tolist() == [950]

    def test_two_step_ratio(self):
        sched = build_cosine_schedule(1000, 0.008)
        sub = build_subsequence(2, (475, 950), "linear", sched)
        assert sub.steps.tolist() == [475, 950]
        assert sub.alpha_sub[1] == pytest.approx(sched.alpha_bar[950] / sched.alpha_bar[475], rel=1e-14)

    def test_tie_break_rounds_down(self):
        sched = build_cosine_schedule(10, 0.008)
        sub = build_subsequence(3, (1, 4), "linear", sched)
        assert sub.steps.tolist() == [1, 2, 4]  # 2.5 rounds toward the lower index

    def test_telescoping_random(self):
        sched = build_cosine_schedule(1000, 0.008)
        rng = np.random.default_rng(5)
        for _ in range(100):
            s1 = int(rng.integers(1, 900))
            sk = int(rng.integers(s1, 1001))
            K = int(rng.integers(1, sk - s1 + 2))
            sub = build_subsequence(K, (s1, sk), "linear", sched)
            assert np.all(np.diff(sub.steps) > 0) or K == 1
            prods = np.cumprod(sub.alpha_sub)
            abar = sched.alpha_bar[sub.steps]
            assert np.all(np.abs(prods - abar) <= 1e-10 * np.abs(abar))

    def test_k_exceeds_span(self):
        sched = build_cosine_schedule(1000, 0.008)
        with pytest.raises(ParameterError):
            build_subsequence(5, (100, 102), "linear", sched)

    def test_bad_endpoints(self):
        sched = build_cosine_schedule(1000, 0.008)
        with pytest.raises(ParameterError):
            build_subsequence(1, (0, 950), "linear", sched)
        with pytest.raises(ParameterError):
            build_subsequence(1, (950, 1001), "linear", sched)


class TestDenoiseMean:
    def test_oracle_reconstruction_k1(self):
        sched = build_cosine_schedule(1000, 0.008)
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = int(rng.integers(1, 1001))
            sub = build_subsequence(1, (s, s), "linear", sched)
            x0 = rng.standard_normal((64, 80))
            eps = rng.standard_normal((64, 80))
            x = forward_diffuse(x0, s, eps, sched)
            rec = denoise_mean(x, eps, sub, 1)
            assert np.max(np.abs(rec - x0)) < 1e-6

    def test_zero_eps_hat(self):
        sched = build_cosine_schedule(100, 0.008)
        sub = build_subsequence(3, (10, 90), "linear", sched)
        x = np.ones((4, 4))
        out = denoise_mean(x, np.zeros_like(x), sub, 2)
        assert np.allclose(out, x / np.sqrt(sub.alpha_sub[1]))

    def test_mid_subsequence_hand_oracle(self):
        sched = build_cosine_schedule(10, 0.008)
        sub = build_subsequence(3, (2, 9), "linear", sched)
        # hand evaluation from the parent tables, independent of SubSchedule
        s_prev, s_k = sub.steps[1], sub.steps[2]
        alpha = sched.alpha_bar[s_k] / sched.alpha_bar[s_prev]
        rng = np.random.default_rng(9)
        x = rng.standard_normal((5, 7))
        eps_hat = rng.standard_normal((5, 7))
        hand = (x - (1 - alpha) / np.sqrt(1 - sched.alpha_bar[s_k]) * eps_hat) / np.sqrt(alpha)
        assert np.allclose(denoise_mean(x, eps_hat, sub, 3), hand, rtol=1e-14)


class TestReverseStep:
    def test_k1_equals_denoise_mean(self):
        sched = build_cosine_schedule(100, 0.008)
        sub = build_subsequence(1, (70, 70), "linear", sched)
        rng = np.random.default_rng(2)
        x, eps_hat = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        assert np.array_equal(reverse_step(x, 1, eps_hat, np.zeros((3, 3)), sub),
                              denoise_mean(x, eps_hat, sub, 1))

    def test_nonzero_z_at_k1_rejected(self):
        sched = build_cosine_schedule(100, 0.008)
        sub = build_subsequence(2, (10, 70), "linear", sched)
        x = np.zeros((2, 2))
        with pytest.raises(ContractError):
            reverse_step(x, 1, x, np.ones((2, 2)), sub)

    def test_k2_hand_oracle(self):
        sched = build_cosine_schedule(10, 0.008)
        sub = build_subsequence(2, (3, 8), "linear", sched)
        rng = np.random.default_rng(4)
        x, eps_hat, z = (rng.standard_normal((4, 6)) for _ in range(3))
        abar_k, abar_prev = sched.alpha_bar[8], sched.alpha_bar[3]
        alpha = abar_k / abar_prev
        sigma = np.sqrt((1 - abar_prev) / (1 - abar_k) * (1 - alpha))
        hand = (x - (1 - alpha) / np.sqrt(1 - abar_k) * eps_hat) / np.sqrt(alpha) + sigma * z
        assert np.allclose(reverse_step(x, 2, eps_hat, z, sub), hand, rtol=1e-13)
