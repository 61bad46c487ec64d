"""Vecchia / nearest-neighbour GP structure and the compiled kernels that
evaluate its univariate conditionals.

Every kernel hard-codes the Matern 3/2 correlation. Observation ``i`` (in
Vecchia order) is conditioned on at most ``k`` earlier-ordered neighbours;
with correlation matrix ``C`` of the neighbours (nugget on the diagonal) and
cross-correlation ``c``, the conditional has mean ``c' C^{-1} e_N`` and
variance ``sigma^2 (1 - c' C^{-1} c)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np


from raisor.errors import DuplicateLocation, InvalidArgument
from raisor.models.covariance import distance_fn

SQRT3 = math.sqrt(3.0)
LOG_2PI = math.log(2.0 * math.pi)


def default_neighbors(n: int) -> int:
    """``ceil(1.2 * log10(n)^2)``, at least 1."""
    if n <= 1:
        return 1
    return max(1, math.ceil(round(1.2 * math.log10(n) ** 2, 9)))


@dataclass(frozen=True)
class VecchiaStructure:
    """Ordering plus, for each ordered point, its earlier-ordered neighbours.

    Attributes:
        ordering: ``ordering[i]`` is the input index of the ``i``-th ordered point.
        neighbors: ``(n, k)`` ordered-position indices, padded with ``-1``.
        counts: number of valid neighbours per row, ``min(i, k)``.
        dist_to: ``(n, k)`` distance from each point to its neighbours.
        dist_between: ``(n, k, k)`` distances among each neighbour set.
    """

    ordering: np.ndarray
    neighbors: np.ndarray
    counts: np.ndarray
    dist_to: np.ndarray
    dist_between: np.ndarray
    k: int
    distance: str

    @property
    def n(self) -> int:
        return self.ordering.shape[0]

    def neighbor_sets(self):
        return [self.neighbors[i, : self.counts[i]].tolist() for i in range(self.n)]


@numba.njit(cache=True)
def _previous_knn(points, k):
    n = points.shape[0]
    dim = points.shape[1]
    nbr = -np.ones((n, k), dtype=np.int64)
    best = np.empty(k)
    for i in range(1, n):
        filled = 0
        for j in range(i):
            d2 = 0.0
            for a in range(dim):
                diff = points[i, a] - points[j, a]
                d2 += diff * diff
            if filled < k:
                pos = filled
                filled += 1
            elif d2 < best[k - 1]:
                pos = k - 1
            else:
                continue
            while pos > 0 and best[pos - 1] > d2:
                best[pos] = best[pos - 1]
                nbr[i, pos] = nbr[i, pos - 1]
                pos -= 1
            best[pos] = d2
            nbr[i, pos] = j
    return nbr


def _search_space(coords, distance):
    """Points whose Euclidean nearest neighbours match the metric's."""
    if distance == "geodesic":
        lon = np.radians(coords[:, 0])
        lat = np.radians(coords[:, 1])
        return np.column_stack([np.cos(lat) * np.cos(lon), np.cos(lat) * np.sin(lon), np.sin(lat)])
    return coords


def check_distinct(coords):
    _, counts = np.unique(np.asarray(coords), axis=0, return_counts=True)
    if np.any(counts > 1):
        raise DuplicateLocation(f"{int(np.sum(counts > 1))} location(s) appear more than once")


def build_vecchia(coords, k: int, ordering_seed=0, distance="euclidean", ordering=None):
    """Random ordering and nearest earlier-ordered neighbour sets.

    Raises:
        DuplicateLocation: if two coordinates coincide.
        InvalidArgument: if ``k < 1``.
    """
    coords = np.asarray(coords, dtype=float)
    if coords.ndim != 2:
        raise InvalidArgument("coords must be an (n, dim) array")
    if k < 1:
        raise InvalidArgument("k must be >= 1")
    check_distinct(coords)
    n = coords.shape[0]
    if ordering is None:
        ordering = np.random.default_rng(ordering_seed).permutation(n)
    ordering = np.asarray(ordering, dtype=np.int64)
    if sorted(ordering.tolist()) != list(range(n)):
        raise InvalidArgument("ordering must be a permutation of 0..n-1")
    k_eff = max(1, min(k, n - 1)) if n > 1 else 1
    ordered = coords[ordering]
    nbr = _previous_knn(np.ascontiguousarray(_search_space(ordered, distance)), k_eff)
    counts = np.minimum(np.arange(n), k_eff)
    fn = distance_fn(distance)
    safe = np.where(nbr < 0, 0, nbr)
    dist_to = fn(ordered[:, None, :], ordered[safe])
    dist_between = fn(ordered[safe][:, :, None, :], ordered[safe][:, None, :, :])
    pad = nbr < 0
    dist_to[pad] = 0.0
    dist_between[pad[:, :, None] | pad[:, None, :]] = 0.0
    return VecchiaStructure(ordering, nbr, counts, dist_to, dist_between, k_eff, distance)


# compiled kernels ---------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _corr(h, phi):
    x = SQRT3 * h / phi
    return (1.0 + x) * math.exp(-x)


@numba.njit(cache=True)
def _factor_row(i, tau2, phi, counts, dist_to, dist_between, C, z):
    """Cholesky of the neighbour correlation (into C) and z = L^{-1} c.

    Returns the conditional variance factor ``1 - z'z``.
    """
    m = counts[i]
    for a in range(m):
        for b in range(a + 1):
            v = (1.0 - tau2) * _corr(dist_between[i, a, b], phi)
            if a == b:
                v = 1.0
            C[a, b] = v
        z[a] = (1.0 - tau2) * _corr(dist_to[i, a], phi)
    # in-place lower Cholesky
    for a in range(m):
        s = C[a, a]
        for c in range(a):
            s -= C[a, c] * C[a, c]
        if s <= 0.0:
            return -1.0
        diag = math.sqrt(s)
        C[a, a] = diag
        for b in range(a + 1, m):
            t = C[b, a]
            for c in range(a):
                t -= C[b, c] * C[a, c]
            C[b, a] = t / diag
    # forward solve
    for a in range(m):
        t = z[a]
        for c in range(a):
            t -= C[a, c] * z[c]
        z[a] = t / C[a, a]
    dz = 0.0
    for a in range(m):
        dz += z[a] * z[a]
    return 1.0 - dz


@numba.njit(parallel=True, cache=True)
def gp_loglik_batch(beta, sigma_sq, tau_sq, phi, y, X, nbr, counts, dist_to, dist_between,
                    i0, i1):
    """Sum of Vecchia conditionals ``i0 <= i < i1`` for each particle."""
    n_part = beta.shape[0]
    p = X.shape[1]
    k = nbr.shape[1]
    out = np.empty(n_part)
    for m in numba.prange(n_part):
        s2 = sigma_sq[m]
        t2 = tau_sq[m]
        ph = phi[m]
        if not (s2 > 0.0 and t2 > 0.0 and t2 < 1.0 and ph > 0.0):
            out[m] = -np.inf
            continue
        C = np.empty((k, k))
        z = np.empty(k)
        w = np.empty(k)
        total = 0.0
        for i in range(i0, i1):
            d = _factor_row(i, t2, ph, counts, dist_to, dist_between, C, z)
            if d <= 0.0:
                total = -np.inf
                break
            mi = counts[i]
            for a in range(mi):
                j = nbr[i, a]
                e = y[j]
                for q in range(p):
                    e -= X[j, q] * beta[m, q]
                for c in range(a):
                    e -= C[a, c] * w[c]
                w[a] = e / C[a, a]
            mean = 0.0
            for a in range(mi):
                mean += z[a] * w[a]
            ei = y[i]
            for q in range(p):
                ei -= X[i, q] * beta[m, q]
            var = s2 * d
            r = ei - mean
            total += -0.5 * (LOG_2PI + math.log(var) + r * r / var)
        out[m] = total
    return out


@numba.njit(cache=True)
def vecchia_factors(tau_sq, phi, counts, dist_to, dist_between, i1):
    """Rows of the sparse factor for the first ``i1`` ordered points.

    Returns ``(B, D)`` with ``B[i] = C^{-1} c`` and ``D[i] = 1 - c' C^{-1} c`` so
    that ``(L v)_i = (v_i - B[i] . v_N(i)) / sqrt(D[i])`` and
    ``Sigma^{-1} = L'L / sigma^2``.
    """
    k = dist_to.shape[1]
    B = np.zeros((i1, k))
    D = np.empty(i1)
    C = np.empty((k, k))
    z = np.empty(k)
    for i in range(i1):
        d = _factor_row(i, tau_sq, phi, counts, dist_to, dist_between, C, z)
        D[i] = d
        m = counts[i]
        # back solve L' b = z
        for a in range(m - 1, -1, -1):
            t = z[a]
            for c in range(a + 1, m):
                t -= C[c, a] * B[i, c]
            B[i, a] = t / C[a, a]
    return B, D


@numba.njit(parallel=True, cache=True)
def predict_moments(weights, beta, sigma_sq, tau_sq, phi, resid_base, X_obs, x_grid,
                    pred_nbr, dist_to, dist_between, nugget):
    """Weighted predictive mean and second moment at each grid point.

    ``resid_base`` is the ordered observation vector; residuals are formed per
    particle. Grid point neighbours index the ordered observations.
    """
    n_grid = x_grid.shape[0]
    n_part = beta.shape[0]
    k = pred_nbr.shape[1]
    p = X_obs.shape[1]
    mean_out = np.zeros(n_grid)
    m2_out = np.zeros(n_grid)
    counts = np.full(n_grid, k)
    for g in numba.prange(n_grid):
        C = np.empty((k, k))
        z = np.empty(k)
        w = np.empty(k)
        acc_mean = 0.0
        acc_m2 = 0.0
        for m in range(n_part):
            wm = weights[m]
            if wm == 0.0:
                continue
            t2 = tau_sq[m]
            ph = phi[m]
            d = _factor_row(g, t2, ph, counts, dist_to, dist_between, C, z)
            for a in range(k):
                j = pred_nbr[g, a]
                e = resid_base[j]
                for q in range(p):
                    e -= X_obs[j, q] * beta[m, q]
                for c in range(a):
                    e -= C[a, c] * w[c]
                w[a] = e / C[a, a]
            mu = 0.0
            for q in range(p):
                mu += x_grid[g, q] * beta[m, q]
            for a in range(k):
                mu += z[a] * w[a]
            if nugget:
                var = sigma_sq[m] * d
            else:
                var = sigma_sq[m] * (d - t2)
            if var < 0.0:
                var = 0.0
            acc_mean += wm * mu
            acc_m2 += wm * (var + mu * mu)
        mean_out[g] = acc_mean
        m2_out[g] = acc_m2
    return mean_out, m2_out
