"""Normal mean with known variance and a normal prior."""

from __future__ import annotations

import math

import numpy as np

from raisor.approx import MixtureProposal, Transform
from raisor.errors import InvalidArgument
from raisor.models.base import Model


class ConjugateNormalModel(Model):
    """``y_i | mu ~ N(mu, sigma_sq)`` independently, ``mu ~ N(mu0, sigma0_sq)``."""

    param_names = ("mu",)
    dim = 1

    def __init__(self, data, mu0=0.0, sigma0_sq=1e4, sigma_sq=1.0):
        if sigma0_sq <= 0 or sigma_sq <= 0:
            raise InvalidArgument("variances must be positive")
        self.data = np.asarray(data, dtype=float).ravel()
        self.mu0 = float(mu0)
        self.sigma0_sq = float(sigma0_sq)
        self.sigma_sq = float(sigma_sq)
        self.n_obs = self.data.size
        self.transform = Transform.identity(1)
        self._centre = float(self.data.mean()) if self.n_obs else 0.0

    def prior_sample(self, count, rng):
        return rng.normal(self.mu0, math.sqrt(self.sigma0_sq), size=(count, 1))

    def log_prior(self, theta):
        mu = self._rows(theta)[:, 0]
        return -0.5 * (math.log(2 * math.pi * self.sigma0_sq) + (mu - self.mu0) ** 2 / self.sigma0_sq)

    def batch_loglik(self, theta, n0, n1):
        self._check_range(n0, n1)
        mu = self._rows(theta)[:, 0]
        b = n1 - n0
        if b == 0:
            return np.zeros(mu.shape)
        # sufficient statistics of the centred batch keep cancellation small
        dev = self.data[n0:n1] - self._centre
        s1 = dev.sum()
        s2 = np.dot(dev, dev)
        shift = mu - self._centre
        quad = s2 - 2.0 * shift * s1 + b * shift**2
        return -0.5 * (b * math.log(2 * math.pi * self.sigma_sq) + quad / self.sigma_sq)

    def initial_sample(self, n0, count, rng):
        mean, var = self.exact_posterior(n0)
        return rng.normal(mean, math.sqrt(var), size=(count, 1))

    def exact_posterior(self, n):
        """``(mu_n, sigma_n^2)`` of ``[mu | y_{1:n}]``."""
        if not 0 <= n <= self.n_obs:
            raise InvalidArgument(f"n must be in [0, {self.n_obs}]")
        prec = 1.0 / self.sigma0_sq + n / self.sigma_sq
        var = 1.0 / prec
        mean = var * (self.mu0 / self.sigma0_sq + self.data[:n].sum() / self.sigma_sq)
        return mean, var

    def posterior_proposal(self, n):
        """The exact ``[mu | y_{1:n}]`` as a one-component mixture."""
        mean, var = self.exact_posterior(n)
        return MixtureProposal(np.ones(1), np.array([[mean]]), np.array([[[var]]]), self.transform)
