"""Proposal family and adaptation.

Gaussian mixtures live in an unconstrained space reached through a
per-coordinate bijection (:class:`Transform`). Mixtures are fitted to
weighted samples by weighted EM, which minimizes the KL divergence from the
weighted target to the mixture.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, log_expit, logit, logsumexp

from raisor.errors import ComponentStarvation, DegenerateWeights, InvalidArgument
from raisor.sampling import WeightedSample, normalize

MIXTURE_FORMAT = "raisor.mixture"
MIXTURE_VERSION = 1

TRANSFORM_TAGS = ("identity", "log", "logit")

EM_TOL = 1e-8
EM_MAX_ITER = 500
EM_RESTARTS = 3
EPS_REG_SCALE = 1e-8


@dataclass(frozen=True)
class Transform:
    """Coordinate-wise bijection ``g`` from model space to R^d."""

    tags: tuple

    def __post_init__(self):
        tags = tuple(self.tags)
        bad = [t for t in tags if t not in TRANSFORM_TAGS]
        if bad:
            raise InvalidArgument(f"unknown transform tags {bad}")
        object.__setattr__(self, "tags", tags)

    @classmethod
    def identity(cls, d: int) -> "Transform":
        return cls(("identity",) * d)

    @property
    def dim(self) -> int:
        return len(self.tags)

    def _cols(self, tag):
        return [i for i, t in enumerate(self.tags) if t == tag]

    def to_unconstrained(self, theta):
        theta = np.asarray(theta, dtype=float)
        out = theta.copy()
        for i in self._cols("log"):
            out[..., i] = np.log(theta[..., i])
        for i in self._cols("logit"):
            out[..., i] = logit(theta[..., i])
        return out

    def to_model(self, u):
        u = np.asarray(u, dtype=float)
        out = u.copy()
        for i in self._cols("log"):
            out[..., i] = np.exp(u[..., i])
        for i in self._cols("logit"):
            out[..., i] = expit(u[..., i])
        return out

    def log_abs_det_jacobian(self, u):
        """``log |d theta / d u|`` summed over coordinates, evaluated at ``u``."""
        u = np.asarray(u, dtype=float)
        total = np.zeros(u.shape[:-1])
        for i in self._cols("log"):
            total = total + u[..., i]
        for i in self._cols("logit"):
            total = total + log_expit(u[..., i]) + log_expit(-u[..., i])
        return total


class DivergenceKind(enum.Enum):
    KL = "KL"
    CHI2 = "CHI2"
    TV = "TV"


def _phi_kl(x):
    with np.errstate(divide="ignore"):
        return -np.log(x)


def _phi_chi2(x):
    with np.errstate(divide="ignore"):
        return (x - 1.0) ** 2 / x


def _phi_tv(x):
    # max(0, 1 - x) generates the same divergence as |x - 1| / 2 for normalized
    # densities, and its plug-in estimate also sees proposal mass the target lacks.
    return np.maximum(0.0, 1.0 - x)


_GENERATORS = {
    DivergenceKind.KL: _phi_kl,
    DivergenceKind.CHI2: _phi_chi2,
    DivergenceKind.TV: _phi_tv,
}


@dataclass(frozen=True)
class DivergenceSpec:
    kind: DivergenceKind = DivergenceKind.KL

    def __post_init__(self):
        object.__setattr__(self, "kind", DivergenceKind(self.kind))

    def phi(self, x):
        return _GENERATORS[self.kind](np.asarray(x, dtype=float))


@numba.njit(parallel=True, cache=True)
def _component_logpdf(u, logw, chol_inv, shift, logdet):
    n, d = u.shape
    k_count = logw.shape[0]
    const = d * math.log(2.0 * math.pi)
    out = np.empty((n, k_count))
    for i in numba.prange(n):
        for k in range(k_count):
            maha = 0.0
            for a in range(d):
                t = -shift[k, a]
                for b in range(a + 1):
                    t += chol_inv[k, a, b] * u[i, b]
                maha += t * t
            out[i, k] = logw[k] - 0.5 * (const + logdet[k] + maha)
    return out


@dataclass(frozen=True)
class MixtureProposal:
    """Gaussian mixture in unconstrained space."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    transform: Transform = None
    _chol: np.ndarray = field(init=False, repr=False, compare=False)
    _logdet: np.ndarray = field(init=False, repr=False, compare=False)
    _chol_inv: np.ndarray = field(init=False, repr=False, compare=False)
    _shift: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = np.atleast_1d(np.asarray(self.weights, dtype=float))
        means = np.asarray(self.means, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        covs = np.asarray(self.covariances, dtype=float)
        k, d = means.shape
        covs = covs.reshape(k, d, d)
        if weights.shape != (k,):
            raise InvalidArgument("mixture weights and means disagree on K")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-12:
            if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-6:
                raise InvalidArgument("mixture weights must be a probability vector")
            weights = weights / weights.sum()
        covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
        try:
            chol = np.linalg.cholesky(covs)
        except np.linalg.LinAlgError as exc:
            raise InvalidArgument("component covariance is not positive definite") from exc
        transform = self.transform or Transform.identity(d)
        if transform.dim != d:
            raise InvalidArgument("transform dimension differs from mixture dimension")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "transform", transform)
        object.__setattr__(self, "_chol", chol)
        # whitening maps z_k = L_k^{-1} u - L_k^{-1} mu_k, shared by every evaluation
        chol_inv = np.tril(np.linalg.inv(chol))
        object.__setattr__(self, "_chol_inv", chol_inv)
        object.__setattr__(self, "_shift", np.einsum("kij,kj->ki", chol_inv, means))
        object.__setattr__(
            self, "_logdet", 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        )

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def component_log_densities(self, u) -> np.ndarray:
        """``(n, K)`` array of ``log pi_k + log N(u; mu_k, S_k)``."""
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[None, :]
        if u.shape[1] != self.dim:
            raise InvalidArgument(f"expected dimension {self.dim}, got {u.shape[1]}")
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return _component_logpdf(np.ascontiguousarray(u), logw, self._chol_inv, self._shift,
                                 self._logdet)

    def log_density(self, u):
        """Mixture log-density in unconstrained space (no Jacobian)."""
        u_arr = np.asarray(u, dtype=float)
        single = u_arr.ndim == 1 and (self.dim > 1 or u_arr.size == 1)
        if (single and u_arr.size != self.dim) or (u_arr.ndim == 2 and u_arr.shape[1] != self.dim):
            raise InvalidArgument(f"expected dimension {self.dim}, got shape {u_arr.shape}")
        values = _logsumexp_rows(self.component_log_densities(u_arr.reshape(-1, self.dim)))
        return float(values[0]) if single else values

    def log_density_model_space(self, theta):
        """Density of ``g^{-1}(U)`` for ``U`` drawn from the mixture."""
        u = self.transform.to_unconstrained(np.asarray(theta, dtype=float))
        return self.log_density(u) - self.transform.log_abs_det_jacobian(u)

    def sample_with_labels(self, count: int, rng):
        if count < 1:
            raise InvalidArgument("count must be >= 1")
        labels = rng.choice(self.n_components, size=count, p=self.weights)
        z = rng.standard_normal((count, self.dim))
        draws = self.means[labels] + np.einsum("nij,nj->ni", self._chol[labels], z)
        return draws, labels

    def sample(self, count: int, rng) -> np.ndarray:
        return self.sample_with_labels(count, rng)[0]

    def inflate(self, scale: float) -> "MixtureProposal":
        """Copy with every covariance multiplied by ``scale`` (>= 1)."""
        if scale < 1.0:
            raise InvalidArgument("inflation factor must be >= 1")
        return MixtureProposal(self.weights, self.means, self.covariances * scale, self.transform)

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": MIXTURE_FORMAT,
            "version": MIXTURE_VERSION,
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "cholesky_lower": [c[np.tril_indices(self.dim)].tolist() for c in self._chol],
            "transform": list(self.transform.tags),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureProposal":
        if doc.get("format") != MIXTURE_FORMAT:
            raise InvalidArgument(f"not a mixture document: {doc.get('format')!r}")
        if doc.get("version") != MIXTURE_VERSION:
            raise InvalidArgument(f"unsupported mixture version {doc.get('version')}")
        means = np.asarray(doc["means"], dtype=float)
        d = means.shape[1]
        rows, cols = np.tril_indices(d)
        covs = []
        for flat in doc["cholesky_lower"]:
            c = np.zeros((d, d))
            c[rows, cols] = flat
            covs.append(c @ c.T)
        return cls(np.asarray(doc["weights"]), means, np.array(covs), Transform(doc["transform"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MixtureProposal":
        return cls.from_dict(json.loads(text))


def _logsumexp_rows(a):
    top = a.max(axis=1)
    safe = np.where(np.isfinite(top), top, 0.0)
    with np.errstate(divide="ignore"):
        return safe + np.log(np.exp(a - safe[:, None]).sum(axis=1))


# weighted EM -----------------------------------------------------------------


def weighted_moments(points, weights):
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean = w @ points
    diff = points - mean
    cov = (diff * w[:, None]).T @ diff
    return mean, cov


def _kmeanspp(points, weights, k, rng):
    """Weighted k-means++ seeding; returns ``k`` centre indices."""
    n = points.shape[0]
    first = rng.choice(n, p=weights)
    centres = [first]
    d2 = np.sum((points - points[first]) ** 2, axis=1)
    for _ in range(1, k):
        score = weights * d2
        total = score.sum()
        if total <= 0:
            remaining = np.setdiff1d(np.flatnonzero(weights > 0), centres)
            nxt = rng.choice(remaining)
        else:
            nxt = rng.choice(n, p=score / total)
        centres.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return np.array(centres)


@dataclass
class EMResult:
    proposal: MixtureProposal
    loglik: float
    history: list
    iterations: int
    converged: bool


@numba.njit(cache=True)
def _m_step(points, wr):
    """Component masses, means and (unregularized) covariances."""
    n, d = points.shape
    k_count = wr.shape[1]
    mass = np.zeros(k_count)
    means = np.zeros((k_count, d))
    covs = np.zeros((k_count, d, d))
    for i in range(n):
        for k in range(k_count):
            r = wr[i, k]
            mass[k] += r
            for a in range(d):
                means[k, a] += r * points[i, a]
    for k in range(k_count):
        if mass[k] > 0:
            means[k] /= mass[k]
    for i in range(n):
        for k in range(k_count):
            r = wr[i, k]
            if r == 0.0:
                continue
            for a in range(d):
                da = points[i, a] - means[k, a]
                for b in range(a + 1):
                    covs[k, a, b] += r * da * (points[i, b] - means[k, b])
    for k in range(k_count):
        for a in range(d):
            for b in range(a + 1):
                v = covs[k, a, b] / mass[k] if mass[k] > 0 else 0.0
                covs[k, a, b] = v
                covs[k, b, a] = v
    return mass, means, covs


def _em_once(points, w, k, rng, eps_reg, tol, max_iter, transform):
    n, d = points.shape
    _, global_cov = weighted_moments(points, w)
    centres = points[_kmeanspp(points, w, k, rng)]
    # hard-assign to the nearest centre for the first M-step
    d2 = ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    resp = np.zeros((n, k))
    resp[np.arange(n), d2.argmin(axis=1)] = 1.0
    history = []
    prev = -np.inf
    converged = False
    eye = np.eye(d)
    it = 0
    mix = None
    for it in range(1, max_iter + 1):
        # M-step
        wr = resp * w[:, None]
        mass = wr.sum(axis=0)
        keep = mass > 1e-12
        if not keep.all():
            wr = wr[:, keep]
            k = int(keep.sum())
        mass, means, covs = _m_step(points, np.ascontiguousarray(wr))
        # a component sitting on a single point falls back to the global shape
        covs[mass * n < 1.0] = global_cov
        covs += eps_reg * eye
        mix = MixtureProposal(mass / mass.sum(), means, covs, transform)
        # E-step
        comp = mix.component_log_densities(points)
        logq = _logsumexp_rows(comp)
        ll = float(w @ logq)
        history.append(ll)
        resp = np.exp(comp - logq[:, None])
        if np.isfinite(prev) and abs(ll - prev) <= tol * max(abs(prev), 1e-300):
            converged = True
            break
        prev = ll
    return EMResult(mix, history[-1], history, it, converged)


def fit_weighted_em(
    points,
    weights,
    n_components: int,
    rng,
    *,
    transform: Transform | None = None,
    tol: float = EM_TOL,
    max_iter: int = EM_MAX_ITER,
    restarts: int = EM_RESTARTS,
    return_result: bool = False,
):
    """Fit a Gaussian mixture to a weighted point set by weighted EM.

    Each restart seeds the means with weighted k-means++; the fit with the
    largest weighted log-likelihood is kept. Covariances receive a ridge of
    ``1e-8 * trace(S) / d`` where ``S`` is the weighted sample covariance.

    Raises:
        ComponentStarvation: if the weights support fewer than
            ``n_components * (d + 1)`` points or their ESS is below
            ``n_components``.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    n, d = points.shape
    w = np.asarray(weights, dtype=float)
    if w.shape != (n,) or np.any(w < 0) or not np.isfinite(w).all():
        raise InvalidArgument("weights must be a finite non-negative vector matching points")
    if w.sum() <= 0:
        raise DegenerateWeights("weights sum to zero")
    w = w / w.sum()
    if n_components < 1:
        raise InvalidArgument("need at least one component")
    support = int(np.count_nonzero(w > 0))
    ess = 1.0 / np.dot(w, w)
    if support < n_components * (d + 1) or ess < n_components:
        raise ComponentStarvation(
            f"{support} supported points (ESS {ess:.1f}) cannot feed {n_components} "
            f"components in dimension {d}"
        )
    _, cov = weighted_moments(points, w)
    eps_reg = EPS_REG_SCALE * max(np.trace(cov), 1e-300) / d
    transform = transform or Transform.identity(d)
    runs = 1 if n_components == 1 else max(1, restarts)
    best = None
    for _ in range(runs):
        res = _em_once(points, w, n_components, rng, eps_reg, tol, max_iter, transform)
        if best is None or res.loglik > best.loglik:
            best = res
    return best if return_result else best.proposal


# divergence estimates ---------------------------------------------------------


def estimate_divergence(spec: DivergenceSpec, sample: WeightedSample, prop: MixtureProposal,
                        target_logpdf) -> float:
    """Plug-in estimate of ``E_target[phi(q / target)]`` from a weighted sample.

    ``target_logpdf`` must be the normalized log-density of the target in the
    same (unconstrained) space as the particles.
    """
    w = normalize(sample.log_weights)
    log_ratio = prop.log_density(sample.particles) - np.asarray(target_logpdf(sample.particles))
    ratio = np.exp(np.clip(log_ratio, -745.0, 709.0))
    values = spec.phi(ratio)
    mask = w > 0
    return float(np.dot(w[mask], values[mask]))
