import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from raisor.approx import (
    DivergenceKind,
    DivergenceSpec,
    MixtureProposal,
    Transform,
    estimate_divergence,
    fit_weighted_em,
    weighted_moments,
)
from raisor.errors import ComponentStarvation, InvalidArgument
from raisor.sampling import WeightedSample


def two_component():
    return MixtureProposal(np.array([0.3, 0.7]), np.array([[-1.0, 0.5], [2.0, 0.0]]),
                           np.array([[[1.0, 0.3], [0.3, 2.0]], [[0.5, 0.0], [0.0, 0.25]]]))


class TestTransform:
    @settings(max_examples=50, deadline=None)
    @given(st.floats(-8, 8), st.floats(1e-6, 1e6), st.floats(1e-6, 1 - 1e-6))
    def test_round_trip(self, a, b, c):
        tr = Transform(("identity", "log", "logit"))
        theta = np.array([a, b, c])
        np.testing.assert_allclose(tr.to_model(tr.to_unconstrained(theta)), theta,
                                   rtol=1e-12, atol=1e-12)

    def test_jacobian_matches_numerical(self):
        tr = Transform(("log", "logit"))
        u = np.array([0.3, -1.2])
        h = 1e-6
        num = [(tr.to_model(u + h * e)[i] - tr.to_model(u - h * e)[i]) / (2 * h)
               for i, e in enumerate(np.eye(2))]
        assert tr.log_abs_det_jacobian(u) == pytest.approx(np.log(np.prod(num)), abs=1e-8)

    def test_unknown_tag(self):
        with pytest.raises(InvalidArgument):
            Transform(("exp",))


class TestLogDensity:
    def test_standard_normal(self):
        mix = MixtureProposal(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)))
        assert mix.log_density(np.zeros(1)) == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_symmetric_mixture(self):
        mix = MixtureProposal(np.array([0.5, 0.5]), np.array([[-2.0], [2.0]]),
                              np.array([[[1.0]], [[1.0]]]))
        x = np.linspace(-5, 5, 11)[:, None]
        np.testing.assert_allclose(mix.log_density(x), mix.log_density(-x), rtol=1e-14)

    def test_direct_summation(self):
        mix = two_component()
        x = np.array([0.4, -0.7])
        direct = sum(w * stats.multivariate_normal(m, c).pdf(x)
                     for w, m, c in zip(mix.weights, mix.means, mix.covariances))
        assert mix.log_density(x) == pytest.approx(np.log(direct), abs=1e-12)

    def test_finite_far_away(self):
        assert np.isfinite(two_component().log_density(np.array([1e3, -1e3])))

    def test_dimension_mismatch(self):
        with pytest.raises(InvalidArgument):
            two_component().log_density(np.zeros(3))

    def test_model_space_density(self):
        mix = MixtureProposal(np.ones(1), np.zeros((1, 1)), np.ones((1, 1, 1)),
                              Transform(("log",)))
        theta = np.array([[2.0]])
        assert mix.log_density_model_space(theta)[0] == pytest.approx(
            stats.lognorm(1.0).logpdf(2.0), abs=1e-12)

    def test_rejects_bad_weights(self):
        with pytest.raises(InvalidArgument):
            MixtureProposal(np.array([0.5, 0.6]), np.zeros((2, 1)), np.ones((2, 1, 1)))


class TestSample:
    def test_component_frequencies(self):
        mix = two_component()
        _, labels = mix.sample_with_labels(100000, np.random.default_rng(0))
        counts = np.bincount(labels, minlength=2)
        assert stats.chisquare(counts, mix.weights * labels.size).pvalue > 1e-3

    def test_delta_like(self):
        mix = MixtureProposal(np.ones(1), np.array([[3.0]]), np.full((1, 1, 1), 1e-8))
        x = mix.sample(1000, np.random.default_rng(1))
        assert abs(x.mean() - 3.0) < 3 * 1e-4 / np.sqrt(1000)

    def test_split(self):
        mix = MixtureProposal(np.array([0.5, 0.5]), np.array([[-10.0], [10.0]]),
                              np.ones((2, 1, 1)))
        x = mix.sample(10000, np.random.default_rng(2))
        assert 0.47 <= np.mean(x > 0) <= 0.53

    def test_determinism(self):
        mix = two_component()
        a = mix.sample(50, np.random.default_rng(3))
        b = mix.sample(50, np.random.default_rng(3))
        np.testing.assert_array_equal(a, b)

    def test_count(self):
        with pytest.raises(InvalidArgument):
            two_component().sample(0, np.random.default_rng(0))


class TestSerialization:
    def test_json_round_trip(self):
        mix = MixtureProposal(two_component().weights, two_component().means,
                              two_component().covariances, Transform(("log", "logit")))
        back = MixtureProposal.from_json(mix.to_json())
        np.testing.assert_allclose(back.covariances, mix.covariances, rtol=1e-14)
        np.testing.assert_array_equal(back.means, mix.means)
        assert back.transform == mix.transform

    def test_version_checked(self):
        doc = two_component().to_dict()
        doc["version"] = 99
        with pytest.raises(InvalidArgument):
            MixtureProposal.from_dict(doc)

    def test_inflate(self):
        mix = two_component().inflate(1.2)
        np.testing.assert_allclose(mix.covariances, two_component().covariances * 1.2)
        with pytest.raises(InvalidArgument):
            mix.inflate(0.9)


class TestWeightedEM:
    def test_single_component_moments(self, rng):
        pts = rng.multivariate_normal([1.0, -2.0], [[2.0, 0.5], [0.5, 1.0]], size=500)
        w = np.full(500, 1 / 500)
        mix = fit_weighted_em(pts, w, 1, rng)
        mean, cov = weighted_moments(pts, w)
        ridge = 1e-8 * np.trace(cov) / 2
        np.testing.assert_allclose(mix.means[0], mean, atol=1e-8)
        np.testing.assert_allclose(mix.covariances[0], cov + ridge * np.eye(2), atol=1e-8)

    def test_two_clusters(self, rng):
        centres = np.array([[-5.0, 0.0], [5.0, 3.0]])
        pts = np.vstack([rng.normal(c, 0.5, size=(400, 2)) for c in centres])
        mix = fit_weighted_em(pts, np.ones(800) / 800, 2, rng)
        order = np.argsort(mix.means[:, 0])
        np.testing.assert_allclose(mix.means[order], centres, atol=0.1)

    def test_weight_additivity(self, rng):
        pts = rng.normal(size=(60, 1))
        w = rng.uniform(0.5, 1.5, size=60)
        w /= w.sum()
        a = fit_weighted_em(pts, w, 1, np.random.default_rng(0))
        dup_pts = np.vstack([pts, pts[:1]])
        dup_w = np.concatenate([w, w[:1] / 2])
        dup_w[0] /= 2
        b = fit_weighted_em(dup_pts, dup_w, 1, np.random.default_rng(0))
        np.testing.assert_allclose(b.means, a.means, atol=1e-9)
        np.testing.assert_allclose(b.covariances, a.covariances, atol=1e-9)

    def test_monotone_loglik(self, rng):
        pts = np.vstack([rng.normal(-2, 1, size=(300, 2)), rng.normal(2, 0.7, size=(300, 2))])
        w = rng.dirichlet(np.ones(600))
        res = fit_weighted_em(pts, w, 3, rng, return_result=True)
        hist = np.array(res.history)
        assert np.all(np.diff(hist) >= -1e-9 * np.abs(hist[:-1]))

    def test_starvation(self, rng):
        pts = rng.normal(size=(10, 2))
        with pytest.raises(ComponentStarvation):
            fit_weighted_em(pts, np.ones(10) / 10, 5, rng)

    def test_fitted_density_integrates_to_one(self, rng):
        pts = rng.standard_t(5, size=(2000, 3))
        mix = fit_weighted_em(pts, np.ones(2000) / 2000, 3, rng)
        # importance check against a broad normal
        ref = stats.multivariate_normal(np.zeros(3), 9 * np.eye(3))
        x = ref.rvs(100000, random_state=1)
        integral = np.mean(np.exp(mix.log_density(x) - ref.logpdf(x)))
        assert abs(integral - 1) < 0.01

    def test_covariances_above_ridge(self, rng):
        pts = rng.normal(size=(200, 2))
        mix = fit_weighted_em(pts, np.ones(200) / 200, 4, rng)
        _, cov = weighted_moments(pts, np.ones(200) / 200)
        ridge = 1e-8 * np.trace(cov) / 2
        assert all(np.linalg.eigvalsh(c).min() >= ridge for c in mix.covariances)


class TestDivergence:
    def test_kl_self(self, rng):
        mix = two_component()
        x = mix.sample(100000, rng)
        s = WeightedSample.uniform(x)
        assert abs(estimate_divergence(DivergenceSpec("KL"), s, mix, mix.log_density)) < 0.01

    def test_chi2_example(self, rng):
        # target N(0, 1), proposal N(0, 1 / alpha) with alpha = 0.25
        prop = MixtureProposal(np.ones(1), np.zeros((1, 1)), np.full((1, 1, 1), 4.0))
        target = stats.norm(0, 1)
        x = prop.sample(100000, rng)
        lw = target.logpdf(x[:, 0]) - prop.log_density(x)
        s = WeightedSample(x, lw, np.zeros(len(x)))
        est = estimate_divergence(DivergenceSpec(DivergenceKind.CHI2), s, prop,
                                  lambda u: target.logpdf(u[:, 0]))
        assert est == pytest.approx(1 / np.sqrt(0.4375) - 1, abs=0.05)

    def test_tv_disjoint(self, rng):
        prop = MixtureProposal(np.ones(1), np.array([[40.0]]), np.ones((1, 1, 1)))
        target = stats.norm(0, 1)
        s = WeightedSample.uniform(rng.normal(size=(5000, 1)))
        est = estimate_divergence(DivergenceSpec("TV"), s, prop, lambda u: target.logpdf(u[:, 0]))
        assert est == pytest.approx(1.0, abs=1e-6)

    def test_generator_normalized(self):
        for kind in DivergenceKind:
            assert DivergenceSpec(kind).phi(1.0) == 0.0
