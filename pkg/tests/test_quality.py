import numpy as np
import pytest
from scipy.stats import norm

from spider.core import (
    InsufficientDataError,
    QualityConfig,
    SelectionMatrix,
    SparseMeasurement,
    StateWindow,
    TrafficSnapshot,
    apply_mask,
)
from spider.quality import (
    LooObservations,
    bootstrap_estimate,
    loo_observations,
    normal_posterior_estimate,
    quality_gate,
)
from spider.reconstruct import knn_reconstructor


def obs_from(residual_values):
    collected = np.asarray(residual_values, dtype=float)
    return LooObservations(
        collected=np.zeros_like(collected),
        reinferred=collected,
        residuals=np.abs(collected),
    )


def window_from(values, bits, t=0):
    truth = TrafficSnapshot(t=t, values=np.asarray(values, dtype=float))
    mask = SelectionMatrix(t=t, bits=np.asarray(bits))
    return StateWindow((apply_mask(truth, mask),))


class TestLooObservations:
    def test_perfect_oracle_gives_zero_residuals(self):
        values = np.arange(16, dtype=float).reshape(4, 4) + 1
        bits = np.zeros((4, 4), dtype=int)
        bits[0, 0] = bits[1, 2] = bits[3, 3] = 1
        window = window_from(values, bits)

        def oracle(win):
            return TrafficSnapshot(t=win.t, values=values)

        oracle.window_frames = None
        obs = loo_observations(window, oracle)
        assert len(obs) == 3
        np.testing.assert_array_equal(obs.residuals, np.zeros(3))

    def test_one_observation_per_sampled_cell(self):
        rng = np.random.default_rng(0)
        values = rng.random((5, 5)) + 1
        bits = (rng.random((5, 5)) < 0.5).astype(int)
        if bits.sum() < 2:
            bits[0, 0] = bits[0, 1] = 1
        window = window_from(values, bits)
        obs = loo_observations(window, knn_reconstructor(k_nn=3))
        assert len(obs) == int(bits.sum())

    def test_matches_manual_loo_on_fixture(self):
        # 4x4 grid, knn with k=2, three sampled cells; hand-execute the loop
        values = np.zeros((4, 4))
        values[0, 0], values[0, 3], values[3, 0] = 4.0, 8.0, 2.0
        bits = np.zeros((4, 4), dtype=int)
        bits[0, 0] = bits[0, 3] = bits[3, 0] = 1
        window = window_from(values, bits)
        obs = loo_observations(window, knn_reconstructor(k_nn=2))

        # leaving (0,0) out: neighbors (0,3) d=3 and (3,0) d=3 -> (8+2)/2 = 5
        # leaving (0,3) out: (0,0) d=3, (3,0) d=sqrt(18) -> weighted mean
        w1, w2 = 1 / 3, 1 / np.sqrt(18)
        exp_03 = (w1 * 4.0 + w2 * 2.0) / (w1 + w2)
        # leaving (3,0) out: (0,0) d=3, (0,3) d=sqrt(18)
        exp_30 = (w1 * 4.0 + w2 * 8.0) / (w1 + w2)
        np.testing.assert_allclose(obs.collected, [4.0, 8.0, 2.0])
        np.testing.assert_allclose(obs.reinferred, [5.0, exp_03, exp_30])
        np.testing.assert_allclose(
            obs.residuals, np.abs(obs.reinferred - obs.collected)
        )

    def test_window_not_mutated(self):
        values = np.arange(16, dtype=float).reshape(4, 4)
        bits = np.eye(4, dtype=int)
        window = window_from(values, bits)
        before_vals = window.current.values.copy()
        before_bits = window.current.mask.bits.copy()
        loo_observations(window, knn_reconstructor(k_nn=2))
        np.testing.assert_array_equal(window.current.values, before_vals)
        np.testing.assert_array_equal(window.current.mask.bits, before_bits)

    def test_too_few_samples(self):
        window = window_from([[1.0, 0.0], [0.0, 0.0]], [[1, 0], [0, 0]])
        with pytest.raises(InsufficientDataError):
            loo_observations(window, knn_reconstructor())


class TestBootstrap:
    def test_all_zero_residuals(self):
        assert bootstrap_estimate(obs_from(np.zeros(10)), epsilon=0.1) == 1.0

    def test_all_one_residuals(self):
        assert bootstrap_estimate(obs_from(np.ones(10)), epsilon=0.5) == 0.0

    def test_truncated_normal_near_half(self):
        # resample means distribute symmetrically about the sample mean (CLT),
        # so P(e <= sample mean) sits near one half
        rng = np.random.default_rng(123)
        sample = np.clip(rng.normal(0.5, 0.1, size=200), 0, None)
        eps = float(np.abs(sample).mean())
        est = bootstrap_estimate(obs_from(sample), epsilon=eps, m=10_000, seed=9)
        assert 0.40 <= est <= 0.60
        # independent check against the normal-posterior route
        ref = normal_posterior_estimate(obs_from(sample), eps)
        assert abs(est - ref) < 0.05

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(5)
        obs = obs_from(rng.random(50))
        estimates = [
            bootstrap_estimate(obs, eps, m=2_000, seed=3)
            for eps in np.linspace(0, 1, 11)
        ]
        assert all(a <= b for a, b in zip(estimates, estimates[1:]))

    def test_deterministic(self):
        obs = obs_from(np.random.default_rng(1).random(30))
        a = bootstrap_estimate(obs, 0.4, m=500, seed=7)
        b = bootstrap_estimate(obs, 0.4, m=500, seed=7)
        assert a == b


class TestNormalPosterior:
    def test_epsilon_at_mean_gives_half(self):
        obs = obs_from([0.2, 0.4, 0.6, 0.8])
        assert normal_posterior_estimate(obs, 0.5) == pytest.approx(0.5)

    def test_epsilon_at_infinity(self):
        obs = obs_from([0.2, 0.4])
        assert normal_posterior_estimate(obs, np.inf) == 1.0

    def test_hand_computed(self):
        obs = obs_from([0.4, 0.6])  # mu=0.5, stderr=0.1
        est = normal_posterior_estimate(obs, 0.6)
        assert est == pytest.approx(norm.cdf(1.0))
        assert est == pytest.approx(0.841, abs=1e-3)

    def test_zero_variance(self):
        obs = obs_from([0.3, 0.3, 0.3])
        assert normal_posterior_estimate(obs, 0.4) == 1.0
        assert normal_posterior_estimate(obs, 0.2) == 0.0

    def test_symmetry(self):
        obs = obs_from([0.1, 0.3, 0.5, 0.9])
        mu = obs.residuals.mean()
        eps = 0.7
        left = normal_posterior_estimate(obs, eps)
        right = normal_posterior_estimate(obs, 2 * mu - eps)
        assert left + right == pytest.approx(1.0)


class TestQualityGate:
    def test_zero_residuals_pass(self):
        cfg = QualityConfig(epsilon=0.1, beta=0.9)
        assert quality_gate(obs_from(np.zeros(20)), cfg) is True

    def test_large_residuals_fail(self):
        cfg = QualityConfig(epsilon=0.5, beta=0.9)
        assert quality_gate(obs_from(np.ones(20)), cfg) is False

    def test_boundary_is_strict(self):
        # estimate exactly at beta must not pass
        cfg = QualityConfig(epsilon=0.5, beta=1.0 - 1e-9)
        assert quality_gate(obs_from(np.zeros(5)), cfg) is True
        cfg_exact = QualityConfig(epsilon=0.5, beta=0.5)
        obs = obs_from([0.4, 0.6] * 10)
        est = bootstrap_estimate(obs, 0.5, m=1000, seed=1)
        expected = est > 0.5
        assert quality_gate(obs, cfg_exact, m=1000, seed=1) is expected
