import math

import numpy as np
import pytest

from raisor import engine as eng
from raisor import theory
from raisor.engine import Engine, EngineConfig, RessEvent, RessTrace, plan_batches, recursive_update
from raisor.errors import AnnealFailed, InvalidArgument
from raisor.models import ConjugateNormalModel
from raisor.sampling import WeightedSample, ress_from_log_weights, self_normalized_estimate


@pytest.fixture(scope="module")
def conj():
    return ConjugateNormalModel(np.random.default_rng(0).normal(0.3, 1.0, size=20000))


def exact_sample(model, n, M, seed):
    rng = np.random.default_rng(seed)
    theta = model.initial_sample(n, M, rng)
    return WeightedSample.uniform(theta, model.batch_loglik(theta, 0, n), n)


class TestConfig:
    def test_defaults(self):
        cfg = EngineConfig()
        assert (cfg.M, cfg.r, cfg.r_min, cfg.B, cfg.K_mix) == (50000, 0.2, 0.1, 20, 10)
        assert cfg.alpha == pytest.approx(2 / 3) and cfg.N_reduce == 5000

    def test_n_reduce_bounded_by_budget(self):
        assert EngineConfig(M=20000).N_reduce == 2000

    @pytest.mark.parametrize("kw", [dict(r=0.05), dict(r_min=0.0), dict(r=1.0), dict(alpha=1.0),
                                    dict(M=1000, N_reduce=500), dict(schedule="weekly"),
                                    dict(B=-1), dict(threads=0)])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            EngineConfig(**kw)

    def test_dict_round_trip(self):
        cfg = EngineConfig(M=3000, seed=5, schedule="exponential")
        assert EngineConfig.from_dict(cfg.to_dict()) == cfg


class TestTrace:
    def test_prefix_must_not_decrease(self):
        tr = RessTrace()
        tr.append(RessEvent(10, 1.0, "init", 0.0, 0))
        with pytest.raises(InvalidArgument):
            tr.append(RessEvent(5, 0.5, "update", 0.1, 1))

    def test_unknown_kind(self):
        with pytest.raises(InvalidArgument):
            RessTrace().append(RessEvent(1, 1.0, "teleport", 0.0, 0))

    def test_columns(self):
        tr = RessTrace()
        tr.append(RessEvent(1, 1.0, "init", 0.0, 0))
        tr.append(RessEvent(3, 0.4, "update", 0.1, 5))
        np.testing.assert_array_equal(tr.column("n"), [1, 3])
        assert tr.count("update") == 1 and len(tr) == 2


class TestRecursiveUpdate:
    def test_zero_length(self, conj):
        s = exact_sample(conj, 10, 100, 1)
        assert recursive_update(s, conj, 10) is s

    def test_two_step_equals_one(self, conj):
        s = exact_sample(conj, 10, 1000, 2)
        a = recursive_update(recursive_update(s, conj, 300), conj, 5000)
        b = recursive_update(s, conj, 5000)
        np.testing.assert_allclose(a.log_weights, b.log_weights, rtol=0, atol=1e-10)
        np.testing.assert_array_equal(a.particles, b.particles)

    def test_from_prior(self, conj):
        rng = np.random.default_rng(3)
        s = WeightedSample.uniform(conj.prior_sample(200000, rng))
        # widen the likelihood by using only a few observations
        out = recursive_update(s, conj, 3)
        mean, var = conj.exact_posterior(3)
        w = out.weights()
        se = math.sqrt(var * np.sum(w**2))
        assert abs(self_normalized_estimate(out)[0] - mean) < 3 * se

    def test_backwards(self, conj):
        s = exact_sample(conj, 10, 10, 1)
        with pytest.raises(InvalidArgument):
            recursive_update(s, conj, 5)


class TestPlanBatches:
    def test_two_thirds(self):
        c = plan_batches(100, 10**6, EngineConfig())
        assert c[-1] == 150 and c[0] == 101
        assert np.all(np.diff(c) > 0) and len(c) <= 21

    def test_half_from_one(self):
        assert plan_batches(1, 100, EngineConfig(alpha=0.5)).tolist() == [2]

    def test_clamped(self):
        c = plan_batches(900, 1000, EngineConfig())
        assert c.max() == 1000

    def test_done(self):
        with pytest.raises(InvalidArgument):
            plan_batches(5, 5, EngineConfig())


class TestReplenish:
    def test_perfect_replenishment(self, conj):
        cfg = EngineConfig(M=10000, seed=1)
        engine = Engine(conj, cfg, exact_proposal=conj.posterior_proposal)
        s = recursive_update(exact_sample(conj, 10, 10000, 4), conj, 2000)
        fresh, _, value = engine.replenish(s)
        assert value >= 0.99 and fresh.prefix_len == 2000

    def test_weight_definition(self, conj):
        engine = Engine(conj, EngineConfig(M=4000, seed=2))
        s = recursive_update(exact_sample(conj, 10, 4000, 5), conj, 200)
        fresh, prop, _ = engine.replenish(s)
        theta = conj.transform.to_model(fresh.particles)
        expected = (conj.batch_loglik(theta, 0, 200) + conj.log_prior(theta)
                    + conj.transform.log_abs_det_jacobian(fresh.particles)
                    - prop.log_density(fresh.particles))
        np.testing.assert_allclose(fresh.log_weights, expected, rtol=0, atol=1e-10)
        np.testing.assert_allclose(fresh.cum_loglik, conj.batch_loglik(theta, 0, 200), atol=1e-10)

    def test_improves_ress(self, conj):
        engine = Engine(conj, EngineConfig(M=4000, seed=3))
        s = recursive_update(exact_sample(conj, 10, 4000, 6), conj, 60)
        before = ress_from_log_weights(s.log_weights)
        _, _, after = engine.replenish(s)
        assert after > before

    def test_components_capped_by_support(self, conj):
        # 40 reduced points support at most 40 // 15 one-dimensional components
        engine = Engine(conj, EngineConfig(M=400, seed=7))
        s = recursive_update(exact_sample(conj, 10, 400, 8), conj, 40)
        _, prop, _ = engine.replenish(s)
        assert np.asarray(prop.means).shape[0] <= 2


class TestAdvance:
    def test_no_replenish_when_above_r(self, conj):
        engine = Engine(conj, EngineConfig(M=20000, seed=4))
        s = exact_sample(conj, 10000, 20000, 7)
        # alpha ladder from 10^4 reaches 15000 where RESS stays near u1(2/3)
        _, events = engine.advance(s)
        assert [e.kind for e in events] == ["update"] and events[0].ress > 0.2

    def test_anneal_path_from_prior(self, conj):
        cfg = EngineConfig(M=2000, seed=5, init="prior")
        engine = Engine(conj, cfg)
        s = engine.initialize()
        s, events = engine.advance(s)
        kinds = [e.kind for e in events]
        assert "anneal_step" in kinds and s.prefix_len == 1
        assert ress_from_log_weights(s.log_weights) >= cfg.r

    def test_replenish_count_bound(self, conj):
        cfg = EngineConfig(M=4000, seed=6)
        model = ConjugateNormalModel(conj.data[:10000])
        _, trace = Engine(model, cfg).run()
        bound = math.ceil(math.log(10000 / 10) / math.log(1.5)) + 3
        assert trace.count("replenish") <= bound


class TestAnneal:
    def test_bisection_on_large_jump(self, conj):
        engine = Engine(conj, EngineConfig(M=5000, seed=7))
        s = exact_sample(conj, 10, 5000, 8)
        delta = conj.batch_loglik(conj.transform.to_model(s.particles), 10, 10010)
        t = engine._bisect_temper(s.log_weights, delta, 0.0)
        value = ress_from_log_weights(s.log_weights + t * delta)
        assert 0 < t < 1 and 0.2 <= value < 1
        assert ress_from_log_weights(s.log_weights + min(1.0, t * 1.01 + 1e-9) * delta) < 0.2

    def test_rescue_steps_meet_threshold(self, conj):
        engine = Engine(conj, EngineConfig(M=5000, seed=8))
        s = exact_sample(conj, 10, 5000, 9)
        out = engine.anneal_rescue(s, 10010)
        steps = [e for e in engine.trace if e.kind == "anneal_step"]
        assert out.prefix_len == 10010 and len(steps) >= 2
        assert all(e.ress >= engine.config.r for e in steps)
        mean, var = conj.exact_posterior(10010)
        assert abs(self_normalized_estimate(out)[0] - mean) < 5 * math.sqrt(var)

    def test_single_step_is_update_plus_replenish(self, conj):
        s = exact_sample(conj, 1000, 4000, 10)
        a = Engine(conj, EngineConfig(M=4000, seed=9))
        out_a = a.anneal_rescue(s, 1100)
        b = Engine(conj, EngineConfig(M=4000, seed=9))
        out_b, _, _ = b.replenish(recursive_update(s, conj, 1100))
        assert a.trace.count("anneal_step") == 1
        np.testing.assert_array_equal(out_a.particles, out_b.particles)
        np.testing.assert_allclose(out_a.log_weights, out_b.log_weights, rtol=0, atol=1e-8)

    def test_step_budget(self, conj):
        engine = Engine(conj, EngineConfig(M=2000, seed=10, anneal_max_steps=1))
        s = exact_sample(conj, 10, 2000, 11)
        with pytest.raises(AnnealFailed):
            engine.anneal_rescue(s, 15000)


class TestRun:
    def test_end_to_end_conjugate(self, conj):
        model = ConjugateNormalModel(conj.data[:5000])
        sample, trace = eng.run(model, EngineConfig(M=10000, seed=11))
        mean, var = model.exact_posterior(5000)
        w = sample.weights()
        x = sample.particles[:, 0]
        est_mean = w @ x
        ess = 1 / np.sum(w**2)
        assert abs(est_mean - mean) < 3 * math.sqrt(var / ess)
        est_var = w @ (x - est_mean) ** 2
        assert abs(est_var - var) < 3 * var * math.sqrt(2 / ess)
        outside = [e.ress for e in trace if e.kind != "anneal_step"]
        assert min(outside) >= 0.1 and trace.events[-1].n == 5000

    def test_deterministic(self, conj):
        model = ConjugateNormalModel(conj.data[:2000])
        a, ta = eng.run(model, EngineConfig(M=3000, seed=12))
        b, tb = eng.run(model, EngineConfig(M=3000, seed=12))
        np.testing.assert_array_equal(a.particles, b.particles)
        np.testing.assert_array_equal(a.log_weights, b.log_weights)
        assert [(e.n, e.ress, e.kind, e.n_evals) for e in ta] == [(e.n, e.ress, e.kind, e.n_evals) for e in tb]

    def test_callback_and_counts(self, conj):
        model = ConjugateNormalModel(conj.data[:1000])
        seen = []
        engine = Engine(model, EngineConfig(M=2000, seed=13))
        engine.run(callback=lambda e, s: seen.append(s.prefix_len))
        assert seen[0] == 10 and seen[-1] == 1000 and seen == sorted(seen)
        assert engine.n_evals == engine.trace.events[-1].n_evals

    def test_degradation_tracks_closed_form(self, conj):
        # along one data path the exact RESS can rise when the running mean
        # drifts back; the estimate must follow it and never rise where it falls
        M, n0 = 20000, 100
        s = exact_sample(conj, n0, M, 14)
        m0, v0 = conj.exact_posterior(n0)
        est, exact = [], []
        for n in np.unique(np.geomspace(n0 + 1, 5000, 40).astype(int)):
            s = recursive_update(s, conj, int(n))
            est.append(ress_from_log_weights(s.log_weights))
            m, v = conj.exact_posterior(int(n))
            exact.append(theory.normal_ress(m, v, m0, v0))
        est, exact = np.array(est), np.array(exact)
        tol = 2 / math.sqrt(M)
        assert np.all(np.abs(est - exact) <= tol)
        falling = np.diff(exact) <= 0
        assert np.all(np.diff(est)[falling] <= tol)

    def test_replenish_count_log_growth(self):
        rng = np.random.default_rng(15)
        data = rng.normal(size=10**5)
        sizes = [10**3, 10**4, 10**5]
        counts = []
        for n in sizes:
            model = ConjugateNormalModel(data[:n])
            cfg = EngineConfig(M=2000, seed=16, schedule="exponential")
            _, trace = Engine(model, cfg).run()
            counts.append(trace.count("replenish"))
        x = np.log(sizes)
        slope, icpt = np.polyfit(x, counts, 1)
        resid = np.array(counts) - (slope * x + icpt)
        r2 = 1 - resid @ resid / np.sum((counts - np.mean(counts)) ** 2)
        assert slope > 0 and r2 > 0.95
