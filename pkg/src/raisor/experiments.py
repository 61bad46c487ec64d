"""Simulation studies: synthetic data, figure-data bundles and timing runs.

Every bundle is a set of CSV files whose columns a plotting script needs.
Wall-clock measurements are kept in separate ``*_timing.csv`` files so the
remaining files are bit-identical across runs with the same seed.
"""

from __future__ import annotations

import math
import time
from pathlib import Path

import numpy as np

from raisor import engine as eng
from raisor import io, mcmc, theory
from raisor.errors import InvalidArgument
from raisor.models import ConjugateNormalModel, GPModel
from raisor.models.covariance import matern, pairwise
from raisor.sampling import WeightedSample, ress_from_log_weights

GP_TRUTH = {"beta": (8.0, 4.0, 16.0), "sigma_sq": 4.0, "tau_sq": 0.05, "phi": 0.05, "nu": 1.5}
DENSE_LIMIT = 20000
FIGURES = ("fig1", "fig2", "fig3", "fig4")
FIG3_SIZES = (160, 320, 640, 1280)


# synthetic data -------------------------------------------------------------------


def simulate_gp(n: int, params=None, seed: int = 0, *, nngp: bool = False, k=None) -> io.PointData:
    """Synthetic geostatistical data on the unit square.

    Locations are uniform on ``(0, 1)^2``, ``X = [1, s1, s2]`` and ``y`` is a
    draw from the exact dense GP. Above 20000 points the dense Cholesky is
    refused unless ``nngp=True``, which draws from the NNGP approximation.
    """
    if n < 1:
        raise InvalidArgument("n must be positive")
    p = dict(GP_TRUTH, **(params or {}))
    if n > DENSE_LIMIT and not nngp:
        raise InvalidArgument(f"dense simulation is limited to {DENSE_LIMIT} points; "
                              "pass nngp=True to simulate from the NNGP approximation")
    rng = np.random.default_rng(seed)
    coords = rng.uniform(size=(n, 2))
    X = np.column_stack([np.ones(n), coords])
    mean = X @ np.asarray(p["beta"], dtype=float)
    if nngp:
        model = GPModel(coords, np.zeros(n), X, k=k, ordering_seed=seed)
        B, D = model.factors(p["tau_sq"], p["phi"])
        nbr = model.structure.neighbors
        e = np.empty(n)
        eps = rng.standard_normal(n) * np.sqrt(p["sigma_sq"] * D)
        for i in range(n):
            c = model.structure.counts[i]
            e[i] = B[i, :c] @ e[nbr[i, :c]] + eps[i]
        resid = np.empty(n)
        resid[model.structure.ordering] = e
    else:
        R = matern(pairwise(coords), p["phi"], p["nu"])
        C = p["sigma_sq"] * ((1 - p["tau_sq"]) * R + p["tau_sq"] * np.eye(n))
        resid = np.linalg.cholesky(C) @ rng.standard_normal(n)
    return io.PointData(coords, mean + resid, None, ("x", "y"), ())


def simulate_conjugate(n: int, seed: int = 0, mu: float = 0.0, sigma_sq: float = 1.0):
    rng = np.random.default_rng(seed)
    return rng.normal(mu, math.sqrt(sigma_sq), size=n)


def gp_model_from_points(data: io.PointData, **kwargs) -> GPModel:
    distance = kwargs.pop("distance", "geodesic" if data.coord_names == ("lon", "lat") else "euclidean")
    return GPModel(data.coords, data.values, data.design(), distance=distance, **kwargs)


def posterior_summary(theta, weights, names, level=0.95):
    """Weighted mean, SD and equal-tailed interval per parameter."""
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    lo_q, hi_q = (1 - level) / 2, 1 - (1 - level) / 2
    out = []
    for j, name in enumerate(names):
        x = theta[:, j]
        mean = float(w @ x)
        sd = math.sqrt(max(float(w @ (x - mean) ** 2), 0.0))
        order = np.argsort(x, kind="stable")
        cdf = np.cumsum(w[order])
        lo = float(x[order][min(np.searchsorted(cdf, lo_q), len(x) - 1)])
        hi = float(x[order][min(np.searchsorted(cdf, hi_q), len(x) - 1)])
        out.append({"param": name, "mean": mean, "sd": sd, "lower": lo, "upper": hi})
    return out


def ess_of_weights(weights) -> float:
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    return float(1.0 / np.dot(w, w))


def replicate_ress(n, alpha, replicates, M=20000, seed=0):
    """Estimated ``RESS(n | ceil(alpha n))`` on independent conjugate-normal data sets.

    Each replicate draws fresh data, ``M`` exact draws from ``[mu | y_{1:n0}]``
    and reweights them by the likelihood of ``y_{n0+1:n}``.
    """
    n0 = math.ceil(alpha * n)
    if not 0 < n0 < n:
        raise InvalidArgument("need 0 < ceil(alpha n) < n")
    out = np.empty(replicates)
    for rep in range(replicates):
        rng = np.random.default_rng([seed, rep])
        model = ConjugateNormalModel(rng.normal(size=n))
        theta = model.initial_sample(n0, M, rng)
        out[rep] = ress_from_log_weights(model.batch_loglik(theta, n0, n))
    return out


# figure bundles ---------------------------------------------------------------------


def _replicates(scale):
    return max(2, int(round(30 * scale)))


def _check_scale(scale):
    if not 0 < scale <= 1:
        raise InvalidArgument("scale must be in (0, 1]")


def fig1_data(scale=1.0, seed=0, M=20000, n=10**4, n0=250, points=60):
    """RESS(n | n0) trajectories without replenishment from exact ``[mu | y_{1:n0}]`` draws."""
    _check_scale(scale)
    reps = _replicates(scale)
    grid = np.unique(np.round(np.geomspace(n0 + 1, n, points)).astype(int))
    rows = []
    for rep in range(reps):
        rng = np.random.default_rng([seed, 1, rep])
        model = ConjugateNormalModel(rng.normal(size=n))
        theta = model.initial_sample(n0, M, rng)
        sample = WeightedSample.uniform(theta, model.batch_loglik(theta, 0, n0), n0)
        rows.append([rep, n0, 1.0, theory.u1(1.0, 1)])
        for m in grid:
            sample = eng.recursive_update(sample, model, int(m))
            rows.append([rep, int(m), ress_from_log_weights(sample.log_weights),
                         theory.u1(n0 / m, 1)])
    return {"fig1_ress.csv": (["replicate", "n", "ress", "u1_bound"], rows)}


def fig2_data(scale=1.0, seed=0, M=20000, points_per_decade=12):
    """RESS trajectories with perfect replenishment at ``n_total^{0, 1/3, 2/3}``."""
    _check_scale(scale)
    reps = _replicates(scale)
    n_total = int(max(10**4, round(10**6 * scale)))
    marks = [int(round(n_total ** (j / 3))) for j in range(3)]
    rows = []
    for rep in range(reps):
        rng = np.random.default_rng([seed, 2, rep])
        model = ConjugateNormalModel(rng.normal(size=n_total))
        for j, start in enumerate(marks):
            stop = marks[j + 1] if j + 1 < len(marks) else n_total
            theta = model.initial_sample(start, M, rng)
            sample = WeightedSample.uniform(theta, model.batch_loglik(theta, 0, start), start)
            rows.append([rep, start, ress_from_log_weights(sample.log_weights), "replenish",
                         1.0])
            decades = max(math.log10(stop / start), 1e-9)
            grid = np.unique(np.round(np.geomspace(start + 1, stop,
                                                   max(2, int(points_per_decade * decades)))))
            for m in grid.astype(int):
                sample = eng.recursive_update(sample, model, int(m))
                rows.append([rep, int(m), ress_from_log_weights(sample.log_weights), "update",
                             theory.u1(start / m, 1)])
    return {"fig2_ress.csv": (["replicate", "n", "ress", "event", "u1_bound"], rows)}


def fit_gp_raisor(model, config: eng.EngineConfig, callback=None):
    start = time.perf_counter()
    engine = eng.Engine(model, config)
    sample, trace = engine.run(callback=callback)
    return sample, trace, engine, time.perf_counter() - start


def fig3_data(scale=1.0, seed=0, M=20000, iterations=20000, burn_in=5000, threads=None,
              sizes=FIG3_SIZES):
    """RAISOR versus MCMC cost and ESS on simulated GP data sets."""
    _check_scale(scale)
    sizes = [s for s in sizes if s <= max(sizes[0], max(sizes) * scale)]
    M = max(2000, int(round(M * scale)))
    iterations = max(2000, int(round(iterations * scale)))
    burn_in = min(burn_in, iterations // 4)
    quality, timing = [], []
    for n in sizes:
        data = simulate_gp(n, seed=seed + n)
        model = gp_model_from_points(data, ordering_seed=seed)
        cfg = eng.EngineConfig(M=M, seed=seed + n, threads=threads)
        sample, trace, engine, secs = fit_gp_raisor(model, cfg)
        ess_r = ess_of_weights(sample.weights())
        quality.append({"method": "raisor", "n": n, "n_evals": engine.n_evals, "ess": ess_r,
                        "replenishments": trace.count("replenish")})
        timing.append({"method": "raisor", "n": n, "seconds": secs,
                       "ess_per_minute": ess_r / (secs / 60)})
        res = mcmc.run_chain(model, iterations, burn_in, np.random.default_rng(seed + n))
        ess_m = float(np.min(res.ess))
        quality.append({"method": "mcmc", "n": n, "n_evals": res.n_evals, "ess": ess_m,
                        "replenishments": 0})
        timing.append({"method": "mcmc", "n": n, "seconds": res.seconds,
                       "ess_per_minute": ess_m / (res.seconds / 60)})
    cols_q = ["method", "n", "n_evals", "ess", "replenishments"]
    cols_t = ["method", "n", "seconds", "ess_per_minute"]
    return {
        "fig3_quality.csv": (cols_q, [[r[c] for c in cols_q] for r in quality]),
        "fig3_timing.csv": (cols_t, [[r[c] for c in cols_t] for r in timing]),
    }


def fig4_data(scale=1.0, seed=0, M=20000, n=2560, threads=None):
    """RESS trajectory and the running posterior of ``phi`` on one GP data set."""
    _check_scale(scale)
    n = max(160, int(round(n * scale)))
    M = max(2000, int(round(M * scale)))
    data = simulate_gp(n, seed=seed)
    model = gp_model_from_points(data, ordering_seed=seed)
    phi_rows = []

    def record(engine, sample):
        theta = model.transform.to_model(sample.particles)
        s = posterior_summary(theta[:, -1:], sample.weights(), ["phi"])[0]
        phi_rows.append([sample.prefix_len, s["mean"], s["lower"], s["upper"], GP_TRUTH["phi"]])

    cfg = eng.EngineConfig(M=M, seed=seed, threads=threads)
    _, trace, _, _ = fit_gp_raisor(model, cfg, callback=record)
    trace_rows = [[e.n, e.ress, e.kind, e.n_evals] for e in trace]
    return {
        "fig4_trace.csv": (["n", "ress", "event", "n_evals"], trace_rows),
        "fig4_phi.csv": (["n", "phi_mean", "phi_lower", "phi_upper", "phi_true"], phi_rows),
    }


def replicate_figure(fig_id: str, scale=1.0, seed=0, out=None, threads=None, full=False):
    """Compute a figure bundle and optionally write it under ``out``.

    ``full=True`` switches to the particle counts and sizes of the original
    study, which take hours.
    """
    if fig_id not in FIGURES:
        raise InvalidArgument(f"unknown figure {fig_id!r}; choose from {FIGURES}")
    M = 50000 if full else 20000
    if fig_id == "fig1":
        bundle = fig1_data(scale, seed, M=M)
    elif fig_id == "fig2":
        bundle = fig2_data(scale, seed, M=M)
    elif fig_id == "fig3":
        sizes = (320, 640, 1280, 2560, 5120, 10240) if full else FIG3_SIZES
        bundle = fig3_data(scale, seed, M=M, iterations=50000 if full else 20000,
                           threads=threads, sizes=sizes)
    else:
        bundle = fig4_data(scale, seed, M=M, n=10240 if full else 2560, threads=threads)
    if out is not None:
        for name, (header, rows) in bundle.items():
            io.write_rows(Path(out) / name, header, rows)
    return bundle


def coverage_study(seeds, n=640, M=20000, level=0.95, out=None):
    """Frequentist coverage of the ``phi`` credible interval over simulated data sets.

    One data set and one RAISOR fit per seed. When ``out`` is given, each row
    is appended to that CSV as soon as it is available so long studies can
    be monitored and resumed; seeds already present in the file are skipped.
    """
    header = ["seed", "phi_mean", "phi_lower", "phi_upper", "covered", "min_ress",
              "replenishments"]
    done = {}
    if out is not None and Path(out).is_file():
        for row in io.read_table_csv(out):
            done[int(row["seed"])] = [row[h] for h in header]
    rows = []
    for seed in seeds:
        if seed in done:
            rows.append(done[seed])
            continue
        data = simulate_gp(n, seed=seed)
        model = gp_model_from_points(data, ordering_seed=seed)
        sample, trace, _, _ = fit_gp_raisor(model, eng.EngineConfig(M=M, seed=seed))
        theta = model.transform.to_model(sample.particles)
        s = posterior_summary(theta[:, -1:], sample.weights(), ["phi"], level)[0]
        outside = [e.ress for e in trace if e.kind in ("update", "replenish")]
        row = [seed, s["mean"], s["lower"], s["upper"],
               int(s["lower"] <= GP_TRUTH["phi"] <= s["upper"]), min(outside),
               trace.count("replenish")]
        rows.append(row)
        if out is not None:
            done[seed] = row
            io.write_rows(out, header, list(done.values()))
    return header, rows


# benchmark ------------------------------------------------------------------------------


def _set_threads(threads):
    import numba

    avail = numba.config.NUMBA_NUM_THREADS
    effective = max(1, min(int(threads), avail))
    numba.set_num_threads(effective)
    return effective


def weight_update_throughput(model, M, threads, seed=0, repeats=3):
    """Per-observation conditionals evaluated per second by the weight update."""
    effective = _set_threads(threads)
    rng = np.random.default_rng(seed)
    theta = model.prior_sample(M, rng)
    model.batch_loglik(theta[:2], 0, min(model.n_obs, 2))
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        model.batch_loglik(theta, 0, model.n_obs)
        best = min(best, time.perf_counter() - t0)
    return effective, M * model.n_obs / best


def benchmark(sizes, methods=("raisor", "mcmc"), threads=(1,), seed=0, M=20000,
              iterations=20000, burn_in=5000, model_params=None):
    """Wall-clock, likelihood work, ESS and ESS per minute per method, size and thread count.

    Returns a list of records; ``threads_effective`` shows the thread count
    actually available to the kernels.
    """
    sizes = list(sizes)
    if not sizes:
        raise InvalidArgument("sizes must be non-empty")
    unknown = set(methods) - {"raisor", "mcmc"}
    if unknown:
        raise InvalidArgument(f"unknown methods {sorted(unknown)}")
    records = []
    for n in sizes:
        data = simulate_gp(n, params=model_params, seed=seed + n)
        model = gp_model_from_points(data, ordering_seed=seed)
        for t in threads:
            effective = _set_threads(t)
            if "raisor" in methods:
                cfg = eng.EngineConfig(M=M, seed=seed + n)
                sample, trace, engine, secs = fit_gp_raisor(model, cfg)
                ess = ess_of_weights(sample.weights())
                _, rate = weight_update_throughput(model, min(M, 5000), t, seed)
                records.append({"method": "raisor", "n": n, "threads": t,
                                "threads_effective": effective, "seconds": secs,
                                "n_evals": engine.n_evals, "ess": ess,
                                "ess_per_minute": ess / (secs / 60), "evals_per_second": rate})
            if "mcmc" in methods:
                res = mcmc.run_chain(model, iterations, burn_in, np.random.default_rng(seed + n))
                ess = float(np.min(res.ess))
                records.append({"method": "mcmc", "n": n, "threads": t,
                                "threads_effective": effective, "seconds": res.seconds,
                                "n_evals": res.n_evals, "ess": ess,
                                "ess_per_minute": ess / (res.seconds / 60),
                                "evals_per_second": res.n_evals / res.seconds})
    return records


BENCHMARK_COLUMNS = ("method", "n", "threads", "threads_effective", "seconds", "n_evals", "ess",
                     "ess_per_minute", "evals_per_second")
