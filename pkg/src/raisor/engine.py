"""Recursive adaptive importance sampling.

The engine keeps a weighted sample for the partial posterior
``[theta | y_{1:n}]`` and grows ``n`` batch by batch. Each batch multiplies
the weights by the conditional likelihood of the new observations. When the
relative effective sample size falls to the replenishment threshold, a
Gaussian mixture is fitted to the weighted sample and fresh particles are
drawn from it with exact weights.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from raisor import approx, sampling
from raisor.errors import (AnnealFailed, ComponentStarvation, DegenerateWeights,
                           InsufficientSupport, InvalidArgument, ReplenishFailed)
from raisor.sampling import WeightedSample, ress_from_log_weights

SCHEDULES = ("threshold", "exponential")
INITS = ("auto", "prior", "mcmc")
EVENT_KINDS = ("init", "update", "replenish", "anneal_step")


@dataclass(frozen=True)
class EngineConfig:
    """Tuning constants of the sampler.

    Attributes:
        M: number of particles.
        r: replenish when the RESS after an update is at or below ``r``.
        r_min: a batch is acceptable only if its RESS stays at or above ``r_min``.
        alpha: batch growth rate; the largest step from ``n`` is ``ceil(n / alpha)``.
        B: number of in-between batch sizes tried each round.
        K_mix: mixture components fitted at replenishment.
        N_reduce: SIR target size before EM; defaults to ``min(5000, floor(M r_min))``.
        n0_init: prefix length of the initial sample.
        init: ``"auto"`` (model-provided draws, else MCMC), ``"prior"`` or ``"mcmc"``.
        anneal_max_steps: tempering steps allowed in one rescue.
        seed: RNG seed.
        tail_inflation: covariance scale applied to fitted mixtures.
        schedule: ``"threshold"`` replenishes when RESS <= r;
            ``"exponential"`` replenishes after every round.
        max_retries: extra refits when the post-replenish RESS is below ``r``.
        threads: worker threads for the likelihood kernels (``None`` keeps the default).
    """

    M: int = 50000
    r: float = 0.2
    r_min: float = 0.1
    alpha: float = 2.0 / 3.0
    B: int = 20
    K_mix: int = 10
    N_reduce: int | None = None
    n0_init: int = 10
    init: str = "auto"
    anneal_max_steps: int = 50
    seed: int = 0
    tail_inflation: float = 1.2
    schedule: str = "threshold"
    max_retries: int = 3
    threads: int | None = None

    def __post_init__(self):
        if self.N_reduce is None:
            object.__setattr__(self, "N_reduce", min(5000, int(math.floor(self.M * self.r_min))))
        self.validate()

    def validate(self):
        if self.M < 2:
            raise InvalidArgument("M must be at least 2")
        if not 0.0 < self.r_min < self.r < 1.0:
            raise InvalidArgument(f"need 0 < r_min < r < 1; got r_min={self.r_min}, r={self.r}")
        if not 0.0 < self.alpha < 1.0:
            raise InvalidArgument(f"alpha must be in (0, 1); got {self.alpha}")
        if self.B < 0 or self.K_mix < 1 or self.n0_init < 0 or self.anneal_max_steps < 1:
            raise InvalidArgument("B, n0_init must be >= 0 and K_mix, anneal_max_steps >= 1")
        if not 1 <= self.N_reduce <= self.M * self.r_min:
            raise InvalidArgument(
                f"need 1 <= N_reduce <= M * r_min; got N_reduce={self.N_reduce}, "
                f"M * r_min={self.M * self.r_min:g}")
        if self.tail_inflation < 1.0:
            raise InvalidArgument("tail_inflation must be >= 1")
        if self.schedule not in SCHEDULES:
            raise InvalidArgument(f"schedule must be one of {SCHEDULES}")
        if self.init not in INITS:
            raise InvalidArgument(f"init must be one of {INITS}")
        if self.threads is not None and self.threads < 1:
            raise InvalidArgument("threads must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "EngineConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgument(f"unknown engine settings {sorted(unknown)}")
        return cls(**doc)


@dataclass(frozen=True)
class RessEvent:
    n: int
    ress: float
    kind: str
    seconds: float
    n_evals: int


@dataclass
class RessTrace:
    """Chronological record of RESS values, replenishments and cost."""

    events: list = field(default_factory=list)

    def append(self, event: RessEvent):
        if event.kind not in EVENT_KINDS:
            raise InvalidArgument(f"unknown event kind {event.kind!r}")
        if self.events and event.n < self.events[-1].n:
            raise InvalidArgument("trace prefixes must be nondecreasing")
        self.events.append(event)

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def count(self, kind: str) -> int:
        return sum(e.kind == kind for e in self.events)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.events])


# primitive steps -------------------------------------------------------------------


def _model_theta(model, particles):
    return model.transform.to_model(particles)


def _loglik(model, particles, n0, n1):
    if n1 == n0:
        return np.zeros(particles.shape[0])
    return np.asarray(model.batch_loglik(_model_theta(model, particles), n0, n1), dtype=float)


def recursive_update(sample: WeightedSample, model, n1: int) -> WeightedSample:
    """Multiply the weights by ``[y_{n+1:n1} | theta, y_{1:n}]``.

    Particle values are untouched; ``cum_loglik`` and ``prefix_len`` advance.
    """
    n = sample.prefix_len
    if n1 < n or n1 > model.n_obs:
        raise InvalidArgument(f"cannot update from prefix {n} to {n1} (n_obs={model.n_obs})")
    if n1 == n:
        return sample
    inc = _loglik(model, sample.particles, n, n1)
    return sample.evolve(log_weights=sample.log_weights + inc,
                         cum_loglik=sample.cum_loglik + inc, prefix_len=n1)


def plan_batches(n_current: int, n_total: int, config: EngineConfig) -> np.ndarray:
    """Candidate next prefixes, geometrically spaced up to ``ceil(n / alpha)``."""
    if n_current >= n_total:
        raise InvalidArgument("nothing left to absorb")
    top = min(max(math.ceil(round(n_current / config.alpha, 9)), n_current + 1), n_total)
    lo = n_current + 1
    if top == lo:
        return np.array([lo], dtype=np.int64)
    grid = np.geomspace(lo, top, config.B + 1)
    cand = np.unique(np.clip(np.round(grid).astype(np.int64), lo, top))
    return cand


def exact_weights(model, particles, proposal, n, temper=None):
    """Fresh log weights ``log [y_{1:n}|theta] + log [theta] + log|J| - log q(u)``.

    ``temper=(n1, t)`` adds ``t * log [y_{n+1:n1} | theta, y_{1:n}]`` for
    tempered intermediate targets. Returns ``(log_weights, cum_loglik,
    tempered_increment)``.
    """
    theta = _model_theta(model, particles)
    lp = np.asarray(model.log_prior(theta), dtype=float)
    ok = np.isfinite(lp)
    cum = np.full(len(particles), -np.inf)
    delta = np.zeros(len(particles))
    if ok.any():
        cum[ok] = model.batch_loglik(theta[ok], 0, n) if n > 0 else 0.0
        if temper is not None:
            delta[ok] = model.batch_loglik(theta[ok], n, temper[0])
    logw = cum + lp + model.transform.log_abs_det_jacobian(particles) - proposal.log_density(particles)
    if temper is not None:
        logw = logw + temper[1] * delta
    logw = np.where(np.isnan(logw), -np.inf, logw)
    return logw, cum, delta


# the engine ---------------------------------------------------------------------------


class Engine:
    """Stateful driver for one run.

    Args:
        model: a :class:`raisor.models.Model`.
        config: engine settings.
        rng: numpy Generator; built from ``config.seed`` when omitted.
        exact_proposal: optional callable ``n -> MixtureProposal`` used instead
            of EM at replenishment (perfect replenishment for models whose
            partial posteriors are known).
    """

    def __init__(self, model, config: EngineConfig | None = None, rng=None, exact_proposal=None):
        self.model = model
        self.config = config or EngineConfig()
        self.rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        self.exact_proposal = exact_proposal
        self.trace = RessTrace()
        self.n_evals = 0
        self.proposal = None
        self.replenish_count = 0
        self._clock = time.perf_counter()
        if self.config.threads is not None:
            import numba

            numba.set_num_threads(min(self.config.threads, numba.config.NUMBA_NUM_THREADS))

    # bookkeeping
    def _record(self, n, ress, kind):
        now = time.perf_counter()
        self.trace.append(RessEvent(int(n), float(ress), kind, now - self._clock, int(self.n_evals)))

    def _count(self, particles, n0, n1):
        self.n_evals += particles * max(n1 - n0, 0)

    # initialisation
    def initialize(self) -> WeightedSample:
        cfg, model = self.config, self.model
        n0 = min(cfg.n0_init, model.n_obs)
        if cfg.init == "prior" or n0 == 0:
            theta, n0 = model.prior_sample(cfg.M, self.rng), 0
        else:
            theta = model.initial_sample(n0, cfg.M, self.rng) if cfg.init == "auto" else None
            if theta is None:
                from raisor.mcmc import partial_posterior_draws

                theta = partial_posterior_draws(model, n0, cfg.M, self.rng)
        particles = model.transform.to_unconstrained(np.asarray(theta, dtype=float))
        cum = _loglik(model, particles, 0, n0)
        self._count(cfg.M, 0, n0)
        sample = WeightedSample(particles, np.zeros(cfg.M), cum, n0, n0)
        self._record(n0, 1.0, "init")
        return sample

    # replenishment
    def _fit(self, sample: WeightedSample, n):
        if self.exact_proposal is not None:
            return self.exact_proposal(n)
        cfg = self.config
        w = sample.weights()
        sampling.check_support(w)
        support = int(np.count_nonzero(w > 0))
        if support > cfg.N_reduce:
            try:
                reduced = sampling.weighted_sir(sample, cfg.N_reduce, self.rng)
            except InsufficientSupport:
                reduced = sample
        else:
            reduced = sample
        keep = reduced.weights() > 0
        points, wts = reduced.particles[keep], reduced.weights()[keep]
        # at least 5 effective points per free parameter of a component
        d = points.shape[1]
        per_component = 5 * (1 + d + d * (d + 1) // 2)
        ess = wts.sum() ** 2 / np.dot(wts, wts)
        k = max(1, min(cfg.K_mix, int(ess // per_component)))
        while True:
            try:
                prop = approx.fit_weighted_em(points, wts, k, self.rng,
                                              transform=self.model.transform)
                break
            except ComponentStarvation as exc:
                if k == 1:
                    raise ReplenishFailed(f"mixture fit failed at n={n}: {exc}") from exc
                k = max(1, k // 2)
        return prop.inflate(cfg.tail_inflation)

    def _draw(self, proposal, n, temper=None):
        u = proposal.sample(self.config.M, self.rng)
        logw, cum, delta = exact_weights(self.model, u, proposal, n, temper)
        self._count(self.config.M, 0, n if temper is None else temper[0])
        return u, logw, cum, delta

    def replenish(self, sample: WeightedSample, temper=None):
        """Fit a proposal to ``sample`` and redraw all particles with exact weights.

        When the fresh sample's RESS is below ``r`` the fit is repeated from
        the better of the current and fresh samples, up to ``max_retries`` times.

        Returns:
            ``(new_sample, proposal, ress)`` plus, under tempering, the
            per-particle untempered increment as a fourth element.
        """
        cfg, n = self.config, sample.prefix_len
        source = sample
        best = None
        for _ in range(cfg.max_retries + 1):
            try:
                proposal = self._fit(source, n)
            except (DegenerateWeights, InsufficientSupport) as exc:
                if best is not None:
                    break
                raise ReplenishFailed(f"cannot replenish at n={n}: {exc}") from exc
            u, logw, cum, delta = self._draw(proposal, n, temper)
            try:
                value = ress_from_log_weights(logw)
            except DegenerateWeights:
                continue
            fresh = WeightedSample(u, logw, cum, n, n)
            if best is None or value > best[2]:
                best = (fresh, proposal, value, delta)
            if value >= cfg.r or self.exact_proposal is not None:
                break
            source = best[0]
        if best is None:
            raise ReplenishFailed(f"every replenishment attempt at n={n} degenerated")
        self.proposal = best[1]
        self.replenish_count += 1
        return best if temper is not None else best[:3]

    # annealed rescue
    def anneal_rescue(self, sample: WeightedSample, target: int) -> WeightedSample:
        """Reach ``target`` through tempered increments ``t * log [y_batch | theta]``.

        Each step picks the largest ``t`` whose tempered RESS is at least
        ``r`` (bisection), falling back to the geometric ladder ``2^(j - J)``
        when no progress is possible, and replenishes at every step.
        """
        cfg, n = self.config, sample.prefix_len
        base = sample.log_weights.copy()
        particles, cum = sample.particles, sample.cum_loglik
        delta = _loglik(self.model, particles, n, target)
        self._count(len(particles), n, target)
        t = 0.0
        J = 10
        for _step in range(cfg.anneal_max_steps):
            t_next = self._bisect_temper(base, delta, t)
            if t_next <= t:
                t_next = min(1.0, 2.0 ** (math.floor(math.log2(t)) + 1) if t > 0 else 2.0 ** -J)
            t = t_next
            tempered = WeightedSample(particles, base + t * delta, cum, n, sample.origin_prefix)
            fresh, _, value, fresh_delta = self.replenish(tempered, temper=(target, t))
            particles, cum, delta = fresh.particles, fresh.cum_loglik, fresh_delta
            base = fresh.log_weights - t * delta
            if t >= 1.0:
                final = WeightedSample(particles, base + delta, cum + delta, target, target)
                self._record(target, value, "anneal_step")
                return final
            self._record(n, value, "anneal_step")
        raise AnnealFailed(f"tempering from n={n} to {target} exceeded "
                           f"{cfg.anneal_max_steps} steps (t={t:.3g})")

    def _bisect_temper(self, base, delta, t0, iters=40):
        r = self.config.r

        def ress_at(t):
            try:
                return ress_from_log_weights(base + t * np.where(np.isfinite(delta), delta, -np.inf))
            except DegenerateWeights:
                return 0.0

        if ress_at(1.0) >= r:
            return 1.0
        if ress_at(t0) < r:
            return t0
        lo, hi = t0, 1.0
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            if ress_at(mid) >= r:
                lo = mid
            else:
                hi = mid
        return lo

    # one round
    def advance(self, sample: WeightedSample):
        """Absorb the next batch chosen from the ladder, replenishing as needed.

        Candidates are updated incrementally from smallest to largest; the
        sweep stops at the first candidate whose RESS falls below ``r_min``.
        Returns ``(sample, events)`` where ``events`` are the new trace entries.
        """
        cfg, model = self.config, self.model
        start = len(self.trace)
        n = sample.prefix_len
        cands = plan_batches(n, model.n_obs, cfg)
        chosen, chosen_ress = None, -1.0
        current = sample
        for c in cands:
            nxt = recursive_update(current, model, int(c))
            self._count(current.size, current.prefix_len, int(c))
            try:
                value = ress_from_log_weights(nxt.log_weights)
            except DegenerateWeights:
                value = 0.0
            if value < cfg.r_min:
                break
            chosen, chosen_ress = nxt, value
            current = nxt
        if chosen is None:
            # no candidate keeps RESS above r_min: temper towards the smallest one
            target = int(cands[0])
            sample = self.anneal_rescue(sample, target)
            # the rescue ends with a replenishment; refit only if it fell short
            if ress_from_log_weights(sample.log_weights) <= cfg.r:
                sample, _, value = self.replenish(sample)
                self._record(sample.prefix_len, value, "replenish")
            return sample, self.trace.events[start:]
        self._record(chosen.prefix_len, chosen_ress, "update")
        sample = chosen
        if cfg.schedule == "exponential" or chosen_ress <= cfg.r:
            sample, _, value = self.replenish(sample)
            self._record(sample.prefix_len, value, "replenish")
        return sample, self.trace.events[start:]

    def run(self, sample: WeightedSample | None = None, callback=None, checkpoint=None):
        """Absorb every observation.

        Args:
            sample: resume from this sample instead of initializing.
            callback: called as ``callback(engine, sample)`` after each round.
            checkpoint: optional path; the state is saved there after each round.

        Returns:
            ``(sample, trace)`` for the full posterior.
        """
        if sample is None:
            sample = self.initialize()
            if callback is not None:
                callback(self, sample)
        while sample.prefix_len < self.model.n_obs:
            sample, _ = self.advance(sample)
            if callback is not None:
                callback(self, sample)
            if checkpoint is not None:
                from raisor.io import save_checkpoint

                save_checkpoint(checkpoint, self, sample)
        return sample, self.trace


def run(model, config: EngineConfig | None = None, rng=None, *, exact_proposal=None,
        callback=None):
    """Fit ``model`` from scratch; returns ``(sample, trace)``."""
    engine = Engine(model, config, rng, exact_proposal)
    return engine.run(callback=callback)


def replenish(sample, model, config, rng, *, exact_proposal=None):
    """Functional form of :meth:`Engine.replenish`; returns ``(sample, proposal)``."""
    engine = Engine(model, config, rng, exact_proposal)
    new, proposal, _ = engine.replenish(sample)
    return new, proposal


def advance(sample, model, config, rng):
    """Functional form of :meth:`Engine.advance`; returns ``(sample, events)``."""
    return Engine(model, config, rng).advance(sample)


def anneal_rescue(sample, model, config, target_prefix, rng):
    """Functional form of :meth:`Engine.anneal_rescue`."""
    return Engine(model, config, rng).anneal_rescue(sample, target_prefix)
