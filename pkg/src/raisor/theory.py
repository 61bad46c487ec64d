"""Closed-form oracles for the asymptotic behaviour of the RESS.

The limiting law of ``RESS(n | alpha n)`` is

    u1(alpha) * exp(-(1 - alpha) / (2 - alpha) * z' M z),   z ~ N(0, I_d),

with ``u1(alpha) = {alpha (2 - alpha)}^{d/2}`` and ``M = (W^{1/2})' V^{-1} W^{1/2}``
built from the curvature ``V`` and the score covariance ``W``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from raisor.errors import InvalidArgument

EIG_CLIP = 1e-10


def _check_alpha(alpha, *, closed=True):
    ok = 0.0 < alpha <= 1.0 if closed else 0.0 < alpha < 1.0
    if not ok:
        raise InvalidArgument(f"alpha must be in (0, 1{']' if closed else ')'}; got {alpha}")


def _check_dim(d):
    if int(d) != d or d < 1:
        raise InvalidArgument(f"dimension must be a positive integer; got {d}")


def u1(alpha: float, d: int) -> float:
    """Deterministic upper bound ``{alpha (2 - alpha)}^{d/2}`` of the limit law."""
    _check_alpha(alpha)
    _check_dim(d)
    return float((alpha * (2.0 - alpha)) ** (d / 2.0))


def closed_form_ress_scale(alpha: float, d: int) -> float:
    """Exact RESS between ``N(m, V^{-1}/n)`` and ``N(m, V^{-1}/(alpha n))``.

    The two normals differ only in scale, and the result coincides with
    :func:`u1`.
    """
    return u1(alpha, d)


def budget_constant(r_min: float, d: int) -> float:
    """``c(r_min, d) = r_min^{-2/d} (1 + sqrt(1 - r_min^{2/d}))``.

    For ``n > c * n0`` the bound ``u1(n0 / n)`` falls below ``r_min``, so no
    proposal fitted at ``n0`` can be used beyond ``c * n0`` observations.
    """
    if not 0.0 < r_min < 1.0:
        raise InvalidArgument(f"r_min must be in (0, 1); got {r_min}")
    _check_dim(d)
    s = r_min ** (2.0 / d)
    return float((1.0 + math.sqrt(1.0 - s)) / s)


def symmetric_sqrt(matrix) -> np.ndarray:
    """Symmetric square root via eigendecomposition, clipping tiny negatives."""
    a = np.atleast_2d(np.asarray(matrix, dtype=float))
    if a.shape[0] != a.shape[1] or not np.allclose(a, a.T, atol=1e-12, rtol=0):
        raise InvalidArgument("matrix must be square and symmetric")
    vals, vecs = np.linalg.eigh(0.5 * (a + a.T))
    if vals.min() < -EIG_CLIP:
        raise InvalidArgument(f"matrix is not positive semi-definite (eigenvalue {vals.min():.3g})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True)
class LimitLaw:
    """Limiting distribution of ``RESS(n | alpha n)``.

    Attributes:
        d: parameter dimension.
        alpha: ratio ``n0 / n`` in ``(0, 1)``.
        M_matrix: symmetric PSD misspecification matrix; the identity for a
            correctly specified model.
    """

    d: int
    alpha: float
    M_matrix: np.ndarray

    def __post_init__(self):
        _check_dim(self.d)
        _check_alpha(self.alpha, closed=False)
        m = np.atleast_2d(np.asarray(self.M_matrix, dtype=float))
        if m.shape != (self.d, self.d):
            raise InvalidArgument(f"M_matrix must be {self.d}x{self.d}")
        if not np.allclose(m, m.T, atol=1e-12, rtol=0):
            raise InvalidArgument("M_matrix must be symmetric")
        if np.linalg.eigvalsh(m).min() < -EIG_CLIP:
            raise InvalidArgument("M_matrix must be positive semi-definite")
        object.__setattr__(self, "M_matrix", m)

    @classmethod
    def well_specified(cls, d, alpha):
        return cls(d, alpha, np.eye(d))

    @classmethod
    def from_sandwich(cls, alpha, V, W):
        """Law with ``M = (W^{1/2})' V^{-1} W^{1/2}``.

        ``W`` is the covariance of the score and ``V`` the expected negative
        Hessian of the log-likelihood at the limiting parameter.
        """
        V = np.atleast_2d(np.asarray(V, dtype=float))
        root = symmetric_sqrt(W)
        m = root.T @ np.linalg.solve(V, root)
        return cls(V.shape[0], alpha, 0.5 * (m + m.T))

    @property
    def rate(self) -> float:
        return (1.0 - self.alpha) / (2.0 - self.alpha)

    @property
    def bound(self) -> float:
        return u1(self.alpha, self.d)

    def evaluate(self, z) -> np.ndarray:
        """``RESS_{theta*, alpha}(z)`` for one or more standard normal vectors."""
        z = np.asarray(z, dtype=float)
        single = z.ndim == 1
        z = np.atleast_2d(z)
        if z.shape[1] != self.d:
            raise InvalidArgument(f"z must have {self.d} columns")
        quad = np.einsum("ij,jk,ik->i", z, self.M_matrix, z)
        out = self.bound * np.exp(-self.rate * quad)
        return float(out[0]) if single else out

    def mean(self) -> float:
        """``E RESS_{theta*, alpha}(z) = u1 / sqrt(det(I + 2 rate M))``."""
        sign, logdet = np.linalg.slogdet(np.eye(self.d) + 2.0 * self.rate * self.M_matrix)
        return float(self.bound * math.exp(-0.5 * logdet))


def sample_limit_ress(law: LimitLaw, count: int, rng, z=None) -> np.ndarray:
    """Independent draws of the limiting RESS.

    Args:
        law: the limit law.
        count: number of draws (ignored when ``z`` is given).
        rng: numpy Generator.
        z: optional ``(count, d)`` array of standard normal vectors to use
            instead of fresh ones.
    """
    if z is None:
        if count < 1:
            raise InvalidArgument("count must be positive")
        z = rng.standard_normal((count, law.d))
    return np.atleast_1d(law.evaluate(np.atleast_2d(z)))


def closed_form_ress_location_scale(n, n0, ybar_full, ybar_prefix, V, W_factor=None) -> float:
    """Exact ``RESS(n | n0)`` between ``N(ybar_n, V^{-1}/n)`` and ``N(ybar_n0, V^{-1}/n0)``.

    Returns ``{n0 (2n - n0) / n^2}^{d/2} exp(-n n0 / (2n - n0) * D' V D)`` with
    ``D = ybar_full - ybar_prefix``.

    When ``W_factor`` (a square root of the data covariance scaled by ``V``,
    i.e. ``W^{1/2}``) is given, the same value is computed through the limit
    law at ``alpha = n0 / n`` with ``z = sqrt((n - n0) n0 / n) W^{-1/2} V
    (ybar_tail - ybar_prefix)``; the two routes agree exactly.
    """
    if not (0 < n0 < n):
        raise InvalidArgument(f"need 0 < n0 < n; got n0={n0}, n={n}")
    V = np.atleast_2d(np.asarray(V, dtype=float))
    d = V.shape[0]
    diff = np.atleast_1d(np.asarray(ybar_full, dtype=float) - np.asarray(ybar_prefix, dtype=float))
    if V.shape != (d, d) or diff.shape != (d,):
        raise InvalidArgument("means and V are not conformable")
    if W_factor is None:
        scale = (n0 * (2.0 * n - n0) / n**2) ** (d / 2.0)
        return float(scale * math.exp(-(n * n0 / (2.0 * n - n0)) * diff @ V @ diff))
    alpha = n0 / n
    root = np.atleast_2d(np.asarray(W_factor, dtype=float))
    # ybar_full - ybar_prefix = (1 - alpha) (ybar_tail - ybar_prefix)
    tail_gap = diff / (1.0 - alpha)
    z = math.sqrt((n - n0) * n0 / n) * np.linalg.solve(root, V @ tail_gap)
    m = root.T @ np.linalg.solve(V, root)
    return float(LimitLaw(d, alpha, 0.5 * (m + m.T)).evaluate(z))


def normal_ress(mean_target, cov_target, mean_proposal, cov_proposal) -> float:
    """Exact RESS ``1 / (1 + chi^2)`` of a normal target under a normal proposal.

    Returns 0 when the proposal is too narrow for the second moment of the
    weights to exist (``2 P_target - P_proposal`` not positive definite).
    """
    m1 = np.atleast_1d(np.asarray(mean_target, dtype=float))
    m0 = np.atleast_1d(np.asarray(mean_proposal, dtype=float))
    s1 = np.atleast_2d(np.asarray(cov_target, dtype=float))
    s0 = np.atleast_2d(np.asarray(cov_proposal, dtype=float))
    d = m1.size
    if m0.shape != (d,) or s1.shape != (d, d) or s0.shape != (d, d):
        raise InvalidArgument("means and covariances are not conformable")
    a1 = np.linalg.inv(s1)
    a0 = np.linalg.inv(s0)
    prec = 2.0 * a1 - a0
    if np.linalg.eigvalsh(0.5 * (prec + prec.T)).min() <= 0:
        return 0.0
    # int N(x; m1, S1)^2 / N(x; m0, S0) dx in closed form
    b = 2.0 * a1 @ m1 - a0 @ m0
    c = 2.0 * m1 @ a1 @ m1 - m0 @ a0 @ m0
    _, ld_s0 = np.linalg.slogdet(s0)
    _, ld_s1 = np.linalg.slogdet(s1)
    _, ld_p = np.linalg.slogdet(prec)
    log_int = 0.5 * ld_s0 - ld_s1 - 0.5 * ld_p + 0.5 * (b @ np.linalg.solve(prec, b) - c)
    return float(math.exp(-log_int))
