"""Geostatistical regression with Matern 3/2 covariance under the NNGP
(Vecchia) approximation.

Parameters, in model space: ``(beta_1..beta_p, sigma_sq, tau_sq, phi)`` with
``Sigma = sigma_sq * ((1 - tau_sq) R(phi) + tau_sq I)``. The unconstrained
coordinates are ``(beta, log sigma_sq, logit tau_sq, log phi)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.spatial import cKDTree

from raisor.approx import Transform
from raisor.errors import InvalidArgument
from raisor.models import vecchia
from raisor.models.base import Model
from raisor.models.covariance import distance_fn

LOG_2PI = math.log(2 * math.pi)


class GPModel(Model):
    """NNGP approximation of the Gaussian-process regression model.

    Observations are consumed in the Vecchia ordering, so the prefix
    ``y_{1:n}`` is the first ``n`` ordered points and each batch term is a
    contiguous sum of univariate conditionals.

    Args:
        coords: ``(n, 2)`` locations (``x, y`` or ``lon, lat`` in degrees).
        y: observations.
        X: covariates; defaults to ``[1, coords]``.
        mu_beta, Sigma_beta: normal prior on the coefficients.
        a1, a2: ``sigma_sq ~ Inverse-Gamma(a1 / 2, a2 / 2)``.
        gamma_sq: ``phi ~ Half-Normal(0, gamma_sq)``.
        k: neighbours per point; defaults to ``ceil(1.2 log10(n)^2)``.
        ordering_seed, ordering: random ordering seed or explicit permutation.
        distance: ``"euclidean"`` or ``"geodesic"`` (great circle, km).
    """

    def __init__(self, coords, y, X=None, *, mu_beta=None, Sigma_beta=None, a1=2.0, a2=2.0,
                 gamma_sq=1.0, nu=1.5, k=None, ordering_seed=0, ordering=None,
                 distance="euclidean"):
        coords = np.asarray(coords, dtype=float)
        y = np.asarray(y, dtype=float).ravel()
        if coords.ndim != 2 or coords.shape[0] != y.size:
            raise InvalidArgument("coords must be (n, dim) with one row per observation")
        if not (np.isfinite(coords).all() and np.isfinite(y).all()):
            raise InvalidArgument("coords and observations must be finite")
        if nu != 1.5:
            raise InvalidArgument("only nu = 3/2 is supported by the likelihood kernels")
        n = y.size
        if X is None:
            X = np.column_stack([np.ones(n), coords])
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise InvalidArgument("X must have one row per observation")
        p = X.shape[1]
        self.p = p
        self.nu = nu
        self.mu_beta = np.zeros(p) if mu_beta is None else np.asarray(mu_beta, dtype=float)
        self.Sigma_beta = (1e4 * np.eye(p) if Sigma_beta is None
                           else np.asarray(Sigma_beta, dtype=float))
        self.a1, self.a2, self.gamma_sq = float(a1), float(a2), float(gamma_sq)
        if min(self.a1, self.a2, self.gamma_sq) <= 0:
            raise InvalidArgument("a1, a2 and gamma_sq must be positive")
        self._Sb_chol = np.linalg.cholesky(self.Sigma_beta)
        self._Sb_prec = np.linalg.inv(self.Sigma_beta)
        self._Sb_logdet = 2 * np.log(np.diag(self._Sb_chol)).sum()

        self.k = vecchia.default_neighbors(n) if k is None else int(k)
        self.structure = vecchia.build_vecchia(coords, self.k, ordering_seed, distance, ordering)
        order = self.structure.ordering
        self.coords_input = coords
        self.coords = coords[order]
        self.y = y[order]
        self.X = np.ascontiguousarray(X[order])
        self.distance = distance
        self.n_obs = n
        self.dim = p + 3
        self.param_names = tuple(f"beta{i}" for i in range(p)) + ("sigma_sq", "tau_sq", "phi")
        self.transform = Transform(("identity",) * p + ("log", "logit", "log"))
        self._tree = None

    # parameter helpers -----------------------------------------------------
    def split(self, theta):
        theta = self._rows(theta)
        p = self.p
        return theta[:, :p], theta[:, p], theta[:, p + 1], theta[:, p + 2]

    def prior_sample(self, count, rng):
        beta = self.mu_beta + rng.standard_normal((count, self.p)) @ self._Sb_chol.T
        sigma_sq = 1.0 / rng.gamma(self.a1 / 2, 2.0 / self.a2, size=count)
        tau_sq = rng.uniform(size=count)
        phi = np.abs(rng.normal(0.0, math.sqrt(self.gamma_sq), size=count))
        return np.column_stack([beta, sigma_sq, tau_sq, phi])

    def log_prior(self, theta):
        beta, s2, t2, phi = self.split(theta)
        diff = beta - self.mu_beta
        lp_beta = -0.5 * (self.p * LOG_2PI + self._Sb_logdet
                          + np.einsum("ij,jk,ik->i", diff, self._Sb_prec, diff))
        a, b = self.a1 / 2, self.a2 / 2
        with np.errstate(divide="ignore", invalid="ignore"):
            lp_s2 = np.where(s2 > 0, a * math.log(b) - math.lgamma(a) - (a + 1) * np.log(s2) - b / s2,
                             -np.inf)
            lp_t2 = np.where((t2 > 0) & (t2 < 1), 0.0, -np.inf)
            lp_phi = np.where(phi >= 0,
                              math.log(2.0) - 0.5 * math.log(2 * math.pi * self.gamma_sq)
                              - phi**2 / (2 * self.gamma_sq), -np.inf)
        return lp_beta + lp_s2 + lp_t2 + lp_phi

    # likelihood --------------------------------------------------------------
    def batch_loglik(self, theta, n0, n1):
        self._check_range(n0, n1)
        beta, s2, t2, phi = self.split(theta)
        if n1 == n0:
            return np.zeros(beta.shape[0])
        st = self.structure
        return vecchia.gp_loglik_batch(
            np.ascontiguousarray(beta), np.ascontiguousarray(s2), np.ascontiguousarray(t2),
            np.ascontiguousarray(phi), self.y, self.X, st.neighbors, st.counts, st.dist_to,
            st.dist_between, int(n0), int(n1))

    def factors(self, tau_sq, phi, n=None):
        """Sparse-factor rows ``(B, D)`` for the first ``n`` ordered points."""
        st = self.structure
        n = self.n_obs if n is None else n
        return vecchia.vecchia_factors(float(tau_sq), float(phi), st.counts, st.dist_to,
                                       st.dist_between, int(n))

    def apply_factor(self, B, D, v):
        """``L v`` for a vector or the columns of a matrix (first ``len(D)`` rows)."""
        n = D.shape[0]
        nbr = np.where(self.structure.neighbors[:n] < 0, 0, self.structure.neighbors[:n])
        v = np.asarray(v, dtype=float)[:n]
        if v.ndim == 1:
            return (v - np.einsum("ik,ik->i", B, v[nbr])) / np.sqrt(D)
        return (v - np.einsum("ik,ikq->iq", B, v[nbr])) / np.sqrt(D)[:, None]

    def initial_sample(self, n0, count, rng):
        from raisor.mcmc import partial_posterior_draws

        return partial_posterior_draws(self, n0, count, rng)

    # prediction ----------------------------------------------------------------
    def _neighbors_for(self, grid):
        """k nearest observed (ordered) points for each grid location."""
        k = min(self.k, self.n_obs)
        if self._tree is None:
            self._tree = cKDTree(vecchia._search_space(self.coords, self.distance))
        _, idx = self._tree.query(vecchia._search_space(grid, self.distance), k=k)
        return np.asarray(idx, dtype=np.int64).reshape(len(grid), k)

    def predict(self, particles_model, weights, grid, X_grid=None, nugget=True):
        """Weighted predictive mean and SD at ``grid`` locations."""
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 2 or grid.shape[0] == 0:
            raise InvalidArgument("prediction grid must be a non-empty (G, dim) array")
        if X_grid is None:
            X_grid = np.column_stack([np.ones(len(grid)), grid])
        X_grid = np.asarray(X_grid, dtype=float)
        if X_grid.shape != (len(grid), self.p):
            raise InvalidArgument("grid covariates do not match the model")
        nbr = self._neighbors_for(grid)
        fn = distance_fn(self.distance)
        dist_to = fn(grid[:, None, :], self.coords[nbr])
        nc = self.coords[nbr]
        dist_between = fn(nc[:, :, None, :], nc[:, None, :, :])
        beta, s2, t2, phi = self.split(particles_model)
        w = np.asarray(weights, dtype=float)
        mean, m2 = vecchia.predict_moments(
            w / w.sum(), np.ascontiguousarray(beta), np.ascontiguousarray(s2),
            np.ascontiguousarray(t2), np.ascontiguousarray(phi), self.y, self.X,
            np.ascontiguousarray(X_grid), nbr, dist_to, dist_between, bool(nugget))
        return mean, np.sqrt(np.maximum(m2 - mean**2, 0.0))


def gp_predict(model: GPModel, sample, grid, X_grid=None, nugget=True):
    """Posterior predictive mean and marginal SD from a weighted sample."""
    theta = model.transform.to_model(sample.particles)
    return model.predict(theta, sample.weights(), grid, X_grid=X_grid, nugget=nugget)
