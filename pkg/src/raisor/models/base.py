"""The interface every model exposes to the engine."""

from __future__ import annotations

import numpy as np

from raisor.approx import Transform
from raisor.errors import InvalidArgument


class Model:
    """Bayesian model over a fixed, ordered observation sequence.

    Subclasses set ``dim``, ``n_obs``, ``transform`` and ``param_names`` and
    implement :meth:`prior_sample`, :meth:`log_prior` and
    :meth:`batch_loglik`. Methods take model-space parameter arrays of shape
    ``(count, dim)`` and are vectorized over rows.
    """

    dim: int
    n_obs: int
    transform: Transform
    param_names: tuple

    def prior_sample(self, count, rng):
        raise NotImplementedError

    def log_prior(self, theta):
        raise NotImplementedError

    def batch_loglik(self, theta, n0, n1):
        """``log [y_{n0+1:n1} | theta, y_{1:n0}]`` for each row of ``theta``."""
        raise NotImplementedError

    def initial_sample(self, n0, count, rng):
        """Draws from ``[theta | y_{1:n0}]`` in model space, or ``None`` to let
        the engine fall back to its generic sampler."""
        return None

    # helpers -------------------------------------------------------------
    def _rows(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.ndim == 1:
            theta = theta.reshape(-1, self.dim) if self.dim > 1 else theta[:, None]
        if theta.shape[1] != self.dim:
            raise InvalidArgument(f"expected {self.dim} parameters, got {theta.shape[1]}")
        return theta

    def _check_range(self, n0, n1):
        if not (0 <= n0 <= n1 <= self.n_obs):
            raise InvalidArgument(f"invalid observation range ({n0}, {n1}] for n={self.n_obs}")

    def log_target(self, theta, n):
        """Unnormalized ``log [theta | y_{1:n}]``."""
        lp = self.log_prior(theta)
        out = np.full(lp.shape, -np.inf)
        ok = np.isfinite(lp)
        if ok.any():
            out[ok] = lp[ok] + self.batch_loglik(self._rows(theta)[ok], 0, n)
        return out

    def log_target_unconstrained(self, u, n):
        """``log`` density of ``g(theta)`` under ``[theta | y_{1:n}]``, unnormalized."""
        u = np.atleast_2d(np.asarray(u, dtype=float))
        theta = self.transform.to_model(u)
        return self.log_target(theta, n) + self.transform.log_abs_det_jacobian(u)
