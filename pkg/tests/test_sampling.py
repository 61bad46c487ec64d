import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from raisor.errors import DegenerateWeights, InsufficientSupport, InvalidArgument
from raisor.sampling import (
    WeightedSample,
    check_support,
    normalize,
    ordered_draw_without_replacement,
    ress,
    ress_from_log_weights,
    self_normalized_estimate,
    weighted_sir,
)

finite_logw = arrays(np.float64, st.integers(1, 40), elements=st.floats(-50, 50))


def sample_from_weights(particles, weights):
    p = np.asarray(particles, dtype=float)
    return WeightedSample(p, np.log(np.asarray(weights, dtype=float)), np.zeros(len(p)))


class TestWeightedSample:
    def test_lengths_must_agree(self):
        with pytest.raises(InvalidArgument):
            WeightedSample(np.zeros((3, 1)), np.zeros(2), np.zeros(3))

    def test_needs_a_particle(self):
        with pytest.raises(InvalidArgument):
            WeightedSample(np.zeros((0, 1)), np.zeros(0), np.zeros(0))

    def test_prefix_cannot_decrease(self):
        s = WeightedSample.uniform(np.zeros(4), prefix_len=5)
        assert s.evolve(prefix_len=7).prefix_len == 7
        with pytest.raises(InvalidArgument):
            s.evolve(prefix_len=4)

    def test_uniform_marks_origin(self):
        s = WeightedSample.uniform(np.arange(3.0), prefix_len=9)
        assert s.origin_prefix == 9 and s.dim == 1 and s.size == 3
        np.testing.assert_allclose(s.weights(), 1 / 3)


class TestNormalize:
    def test_uniform(self):
        np.testing.assert_allclose(normalize([0, 0, 0, 0]), [0.25] * 4)

    @pytest.mark.parametrize("c", [-700.0, -3.2, 0.0, 55.0, 900.0])
    def test_shift(self, c):
        np.testing.assert_allclose(normalize([c, c + np.log(3)]), [0.25, 0.75], rtol=1e-12)

    def test_no_underflow(self):
        np.testing.assert_array_equal(normalize([-1000.0, -1000.0]), [0.5, 0.5])

    def test_all_neg_inf(self):
        with pytest.raises(DegenerateWeights):
            normalize([-np.inf, -np.inf])

    def test_nan_rejected(self):
        with pytest.raises(DegenerateWeights):
            normalize([0.0, np.nan])

    def test_partial_neg_inf(self):
        np.testing.assert_allclose(normalize([-np.inf, 0.0, 0.0]), [0, 0.5, 0.5])

    @settings(max_examples=60, deadline=None)
    @given(finite_logw, st.floats(-500, 500))
    def test_shift_invariance_property(self, lw, c):
        w = normalize(lw)
        assert abs(w.sum() - 1) < 1e-12 and np.all(w >= 0)
        np.testing.assert_allclose(normalize(lw + c), w, rtol=1e-9, atol=1e-300)


class TestSupport:
    def test_counts(self):
        assert check_support([0.5, 0.5, 0.0]) == 2

    def test_degenerate(self):
        with pytest.raises(DegenerateWeights):
            check_support([1.0, 0.0, 1e-310])


class TestEstimate:
    def test_uniform_mean(self):
        s = WeightedSample.uniform(np.array([1.0, 2.0, 3.0]))
        assert self_normalized_estimate(s)[0] == pytest.approx(2.0)

    def test_hand_weights(self):
        s = sample_from_weights([0.0, 4.0], [1, 3])
        assert self_normalized_estimate(s)[0] == pytest.approx(3.0)

    def test_function_values(self):
        s = sample_from_weights([1.0, 2.0], [1, 1])
        assert self_normalized_estimate(s, lambda x: x[:, 0] ** 2) == pytest.approx(2.5)

    def test_conjugate_posterior_mean(self, rng):
        # prior N(0, 10) particles reweighted by 20 unit-variance observations
        y = rng.normal(1.5, 1.0, size=20)
        theta = rng.normal(0.0, np.sqrt(10.0), size=200000)
        logw = -0.5 * ((y[None, :] - theta[:, None]) ** 2).sum(axis=1)
        s = WeightedSample(theta, logw, logw)
        post_var = 1.0 / (1 / 10 + 20)
        post_mean = post_var * y.sum()
        est = self_normalized_estimate(s)[0]
        se = np.sqrt(post_var / (s.size * ress(s).ress))
        assert abs(est - post_mean) < 3 * se


class TestRess:
    def test_uniform(self):
        assert ress(sample_from_weights(np.arange(4.0), [1, 1, 1, 1])).ress == pytest.approx(1.0)

    def test_single_mass(self):
        lw = np.array([0.0, -np.inf, -np.inf, -np.inf])
        s = WeightedSample(np.arange(4.0), lw, np.zeros(4))
        assert ress(s).ress == pytest.approx(0.25)

    def test_hand(self):
        assert ress(sample_from_weights(np.arange(3.0), [2, 1, 1])).ress == pytest.approx(8 / 9)

    def test_ess_consistent(self):
        s = sample_from_weights(np.arange(3.0), [2, 1, 1])
        est = ress(s)
        assert abs(est.ess - 3 * est.ress) < 1e-9 and est.n == 0

    @settings(max_examples=60, deadline=None)
    @given(finite_logw, st.floats(-30, 30), st.randoms(use_true_random=False))
    def test_permutation_and_scale_invariance(self, lw, c, pyrandom):
        value = ress_from_log_weights(lw)
        assert 0 < value <= 1 + 1e-12
        perm = list(range(lw.size))
        pyrandom.shuffle(perm)
        assert ress_from_log_weights(lw[perm] + c) == pytest.approx(value, rel=1e-9)

    def test_consistency_with_closed_form(self):
        # exact N(ybar_n0, 1/n0) draws weighted to N(ybar_n, 1/n): unit V, d = 1
        n, n0, gap = 400, 100, 0.08
        rng = np.random.default_rng(1)
        theta = rng.normal(0.0, np.sqrt(1 / n0), size=100000)
        # log-likelihood of the tail with sufficient statistics
        tail_mean = (n * gap) / (n - n0)
        logw = -0.5 * (n - n0) * (theta - tail_mean) ** 2
        est = ress_from_log_weights(logw)
        exact = (n0 * (2 * n - n0) / n**2) ** 0.5 * np.exp(-(n * n0 / (2 * n - n0)) * gap**2)
        assert abs(est - exact) < 0.02


class TestWeightedSir:
    def test_uniform_small(self, rng):
        s = WeightedSample.uniform(np.arange(4.0))
        out = weighted_sir(s, 2, rng)
        assert out.size == 2 and len(set(out.particles[:, 0])) == 2
        assert out.weights().sum() == pytest.approx(1.0)

    def test_rejects_large_target(self, rng):
        with pytest.raises(InvalidArgument):
            weighted_sir(WeightedSample.uniform(np.arange(4.0)), 4, rng)

    def test_insufficient_support(self, rng):
        lw = np.array([0.0, 0.0, -np.inf, -np.inf, -np.inf])
        with pytest.raises(InsufficientSupport):
            weighted_sir(WeightedSample(np.arange(5.0), lw, np.zeros(5)), 3, rng)

    def test_keeps_state(self, rng):
        s = WeightedSample(np.arange(6.0), np.log(np.arange(1, 7.0)), np.arange(6.0) * 2, 8, 3)
        out = weighted_sir(s, 3, rng)
        np.testing.assert_array_equal(out.cum_loglik, out.particles[:, 0] * 2)
        assert (out.prefix_len, out.origin_prefix) == (8, 3)

    def test_draw_order_is_size_biased(self):
        # the first index drawn follows the weights
        w = np.array([0.6, 0.3, 0.1])
        rng = np.random.default_rng(2)
        firsts = np.array([ordered_draw_without_replacement(w, 2, rng)[0] for _ in range(20000)])
        freq = np.bincount(firsts, minlength=3) / firsts.size
        np.testing.assert_allclose(freq, w, atol=0.015)

    def test_reproducible(self):
        s = sample_from_weights(np.arange(50.0), np.arange(1, 51.0))
        a = weighted_sir(s, 10, np.random.default_rng(4))
        b = weighted_sir(s, 10, np.random.default_rng(4))
        np.testing.assert_array_equal(a.particles, b.particles)
        np.testing.assert_array_equal(a.log_weights, b.log_weights)

    def test_two_of_three_exact_law(self):
        # draws continue until two distinct values appear, so the kept weight
        # of the heavy particle is 0.9 E[(G+1)/(G+2)] + 0.1 E[1/(G'+2)]
        def inv(s):
            g = np.arange(4000)
            return float(np.sum(s * (1 - s) ** g / (g + 2)))

        exact = 0.9 * (1 - inv(0.1)) + 0.1 * inv(0.9)
        s = WeightedSample(np.array([1.0, 0.0, 0.0]), np.log([0.9, 0.1 - 1e-12, 1e-12]), np.zeros(3))
        rng = np.random.default_rng(9)
        est = np.empty(20000)
        for i in range(est.size):
            out = weighted_sir(s, 2, rng)
            est[i] = out.weights() @ out.particles[:, 0]
        assert exact == pytest.approx(0.79240, abs=1e-5)
        assert abs(est.mean() - exact) < 4 * est.std() / np.sqrt(est.size)
