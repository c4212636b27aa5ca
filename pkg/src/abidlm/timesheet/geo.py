"""Great-circle distances, linear track interpolation and Gaussian radial averaging."""

from __future__ import annotations

import numpy as np

EARTH_RADIUS_M = 6_371_000.0


def haversine(p1, p2) -> np.ndarray:
    """Distance in meters between (lat, lon) points given in degrees; broadcasts."""
    p1 = np.asarray(p1, dtype=float)
    p2 = np.asarray(p2, dtype=float)
    lat1, lon1 = np.radians(p1[..., 0]), np.radians(p1[..., 1])
    lat2, lon2 = np.radians(p2[..., 0]), np.radians(p2[..., 1])
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def interpolate_geo(epochs, coords, t: float) -> np.ndarray:
    """Linear interpolation of coordinates between the bracketing observed epochs.

    ``epochs`` are the observed epoch indices (increasing) and ``coords`` the
    matching ``(n, 2)`` (lat, lon) rows.  ``t`` must lie inside the observed
    span; there is no extrapolation.
    """
    epochs = np.asarray(epochs, dtype=float)
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    if epochs.size == 0 or t < epochs[0] or t > epochs[-1]:
        span = (epochs[0], epochs[-1]) if epochs.size else ()
        raise ValueError(f"epoch {t} is outside the observed span {span}")
    hi = int(np.searchsorted(epochs, t, side="left"))
    if epochs[hi] == t:
        return coords[hi].copy()
    lo = hi - 1
    w = (t - epochs[lo]) / (epochs[hi] - epochs[lo])
    return w * (coords[hi] - coords[lo]) + coords[lo]


def radial_average(target, points, values, r_s: float = 200.0) -> np.ndarray | None:
    """Gaussian-weighted mean of ``values`` rows over points strictly within ``r_s`` meters.

    Weights are exp(-d^2 / (2 r_s^2)) without the normalizing constant.
    Returns None when no point falls inside the radius.
    """
    if r_s <= 0:
        raise ValueError("radius must be positive")
    points = np.asarray(points, dtype=float).reshape(-1, 2)
    values = np.asarray(values, dtype=float).reshape(points.shape[0], -1)
    d = haversine(np.asarray(target, dtype=float), points)
    inside = d < r_s
    if not inside.any():
        return None
    w = np.exp(-d[inside] ** 2 / (2.0 * r_s**2))
    return w @ values[inside] / w.sum()
