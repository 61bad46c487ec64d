"""Matern correlation and distance helpers."""

from __future__ import annotations

import numpy as np
from scipy.special import gamma, kv

EARTH_RADIUS_KM = 6371.0088


def matern32(h, phi):
    """Matern correlation with smoothness 3/2: ``(1 + x) exp(-x)``, ``x = sqrt(3) h / phi``."""
    x = np.sqrt(3.0) * np.asarray(h, dtype=float) / phi
    return (1.0 + x) * np.exp(-x)


def matern_bessel(h, phi, nu):
    """General Matern correlation through the modified Bessel function ``K_nu``.

    ``R = 2^{1-nu} / Gamma(nu) * x^nu * K_nu(x)`` with ``x = sqrt(2 nu) h / phi``;
    ``R(0) = 1``.
    """
    h = np.asarray(h, dtype=float)
    x = np.sqrt(2.0 * nu) * h / phi
    out = np.ones_like(x)
    pos = x > 0
    xp = x[pos]
    out[pos] = 2.0 ** (1.0 - nu) / gamma(nu) * xp**nu * kv(nu, xp)
    return out


def matern(h, phi, nu=1.5):
    if nu == 1.5:
        return matern32(h, phi)
    return matern_bessel(h, phi, nu)


def euclidean(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return np.sqrt(np.sum((a - b) ** 2, axis=-1))


def haversine(a, b, radius=EARTH_RADIUS_KM):
    """Great-circle distance between ``(lon, lat)`` points given in degrees."""
    a = np.radians(np.asarray(a, dtype=float))
    b = np.radians(np.asarray(b, dtype=float))
    dlon = b[..., 0] - a[..., 0]
    dlat = b[..., 1] - a[..., 1]
    s = np.sin(dlat / 2) ** 2 + np.cos(a[..., 1]) * np.cos(b[..., 1]) * np.sin(dlon / 2) ** 2
    return 2.0 * radius * np.arcsin(np.sqrt(np.clip(s, 0.0, 1.0)))


DISTANCES = {"euclidean": euclidean, "geodesic": haversine}


def distance_fn(name):
    try:
        return DISTANCES[name]
    except KeyError:
        raise ValueError(f"unknown distance {name!r}; choose from {sorted(DISTANCES)}") from None


def pairwise(coords, distance="euclidean"):
    fn = distance_fn(distance)
    coords = np.asarray(coords, dtype=float)
    return fn(coords[:, None, :], coords[None, :, :])
