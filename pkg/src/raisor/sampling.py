"""Weighted-sample primitives: log-space weights, self-normalized estimates,
relative effective sample size and weighted sampling-importance-resampling.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from raisor.errors import DegenerateWeights, InsufficientSupport, InvalidArgument

# Normalized weights at or below this value do not count as support.
SUPPORT_FLOOR = 1e-300


@dataclass(frozen=True)
class WeightedSample:
    """A weighted particle approximation of a (partial) posterior.

    Attributes:
        particles: ``(M, d)`` particle values in unconstrained space.
        log_weights: ``(M,)`` unnormalized log importance weights.
        cum_loglik: ``(M,)`` running ``log [y_{1:n} | theta_m]`` for the
            current prefix length.
        prefix_len: number of observations ``n`` already absorbed.
        origin_prefix: prefix length at which these particles were drawn
            (the last replenishment), used to label RESS estimates.
    """

    particles: np.ndarray
    log_weights: np.ndarray
    cum_loglik: np.ndarray
    prefix_len: int = 0
    origin_prefix: int = 0

    def __post_init__(self):
        particles = np.asarray(self.particles, dtype=float)
        if particles.ndim == 1:
            particles = particles[:, None]
        log_weights = np.asarray(self.log_weights, dtype=float)
        cum_loglik = np.asarray(self.cum_loglik, dtype=float)
        m = particles.shape[0]
        if m < 1:
            raise InvalidArgument("a weighted sample needs at least one particle")
        if log_weights.shape != (m,) or cum_loglik.shape != (m,):
            raise InvalidArgument(
                f"particles, log_weights and cum_loglik lengths differ: "
                f"{m}, {log_weights.shape}, {cum_loglik.shape}"
            )
        if self.prefix_len < 0 or self.origin_prefix > self.prefix_len:
            raise InvalidArgument("need 0 <= origin_prefix <= prefix_len")
        object.__setattr__(self, "particles", particles)
        object.__setattr__(self, "log_weights", log_weights)
        object.__setattr__(self, "cum_loglik", cum_loglik)

    @classmethod
    def uniform(cls, particles, cum_loglik=None, prefix_len=0):
        """Equally weighted sample, e.g. exact draws from the current target."""
        particles = np.asarray(particles, dtype=float)
        if particles.ndim == 1:
            particles = particles[:, None]
        m = particles.shape[0]
        if cum_loglik is None:
            cum_loglik = np.zeros(m)
        return cls(particles, np.zeros(m), cum_loglik, prefix_len, prefix_len)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def weights(self) -> np.ndarray:
        return normalize(self.log_weights)

    def evolve(self, **changes) -> "WeightedSample":
        if "prefix_len" in changes and changes["prefix_len"] < self.prefix_len:
            raise InvalidArgument("prefix_len may not decrease")
        return replace(self, **changes)


@dataclass(frozen=True)
class RessEstimate:
    ress: float
    ess: float
    n: int
    n0: int


def normalize(log_weights) -> np.ndarray:
    """Self-normalized weights from unnormalized log weights.

    Uses max-subtracted log-sum-exp, so adding a constant to every entry
    leaves the output unchanged.

    Raises:
        DegenerateWeights: if no entry is finite (or any entry is NaN).
    """
    lw = np.asarray(log_weights, dtype=float)
    if lw.size == 0 or np.isnan(lw).any() or not np.isfinite(lw).any():
        raise DegenerateWeights("no finite log weight to normalize")
    if np.isposinf(lw).any():
        raise DegenerateWeights("infinite log weight")
    w = np.exp(lw - logsumexp(lw))
    return w / w.sum()


def check_support(weights, minimum: int = 2) -> int:
    """Count particles with non-negligible normalized weight.

    Raises:
        DegenerateWeights: if fewer than ``minimum`` carry more than
            ``SUPPORT_FLOOR``.
    """
    count = int(np.count_nonzero(np.asarray(weights) > SUPPORT_FLOOR))
    if count < minimum:
        raise DegenerateWeights(
            f"only {count} particle(s) carry weight; need at least {minimum}"
        )
    return count


def self_normalized_estimate(sample: WeightedSample, f=None) -> np.ndarray:
    """Weighted average ``sum_m w_m f(theta_m)``.

    ``f`` maps the ``(M, d)`` particle array to an ``(M,)`` or ``(M, q)``
    array; the identity is used when omitted.
    """
    w = sample.weights()
    values = sample.particles if f is None else np.asarray(f(sample.particles), dtype=float)
    return np.tensordot(w, values, axes=(0, 0))


def ress_from_log_weights(log_weights) -> float:
    """``(mean w)^2 / mean(w^2)`` computed on normalized weights."""
    w = normalize(log_weights)
    return float(1.0 / (w.size * np.dot(w, w)))


def ress(sample: WeightedSample) -> RessEstimate:
    """Relative and absolute effective sample size of ``sample``."""
    value = min(ress_from_log_weights(sample.log_weights), 1.0)
    return RessEstimate(
        ress=value,
        ess=sample.size * value,
        n=sample.prefix_len,
        n0=sample.origin_prefix,
    )


def ordered_draw_without_replacement(weights, count: int, rng) -> np.ndarray:
    """Indices drawn successively without replacement, in draw order.

    Gumbel-top-k: sorting ``log w + Gumbel`` in decreasing order has the same
    law as drawing one index at a time proportional to the remaining weights.
    """
    w = np.asarray(weights, dtype=float)
    with np.errstate(divide="ignore"):
        keys = np.log(w) + rng.gumbel(size=w.size)
    top = np.argpartition(-keys, count - 1)[:count]
    return top[np.argsort(-keys[top], kind="stable")]


def weighted_sir(sample: WeightedSample, target_size: int, rng) -> WeightedSample:
    """Shrink a weighted sample to ``target_size`` distinct particles.

    Draws distinct indices without replacement proportional to the weights,
    then reconstructs how many repeats plain multinomial resampling would
    have produced before each new index appeared: after ``j`` distinct
    draws the number of repeats is Geometric (failures before success) with
    success probability equal to the unseen weight, and the repeats are
    split multinomially over the ``j`` seen particles. Output weights are
    proportional to ``1 + repeats``.
    """
    m = sample.size
    if not 0 < target_size < m:
        raise InvalidArgument(f"target_size must be in (0, {m}); got {target_size}")
    w = sample.weights()
    positive = int(np.count_nonzero(w > 0))
    if positive < target_size:
        raise InsufficientSupport(
            f"{positive} particles have positive weight; {target_size} requested"
        )
    idx = ordered_draw_without_replacement(w, target_size, rng)
    w_sel = w[idx]
    # unseen mass after j selections, summed from the tail for accuracy
    rest = w.sum() - w_sel.sum()
    unseen = np.clip(rest + np.cumsum(w_sel[::-1])[::-1], 0.0, 1.0)
    counts = np.ones(target_size)
    for j in range(1, target_size):
        p = unseen[j]
        if p <= 0.0:
            break
        k = rng.geometric(p) - 1
        if k > 0:
            probs = w_sel[:j] / w_sel[:j].sum()
            counts[:j] += rng.multinomial(k, probs)
    new_w = counts / counts.sum()
    return WeightedSample(
        particles=sample.particles[idx],
        log_weights=np.log(new_w),
        cum_loglik=sample.cum_loglik[idx],
        prefix_len=sample.prefix_len,
        origin_prefix=sample.origin_prefix,
    )
