"""Unit vectors and axial directions on the sphere S^2.

All functions accept a single 3-vector or an ``(n, 3)`` stack and are
vectorised over the leading axis.
"""
from __future__ import annotations

import numpy as np

from .errors import NearZeroVector

NORM_EPS = 1e-6

SPHERICAL = "spherical"
AXIAL = "axial"
METRIC_MODES = (SPHERICAL, AXIAL)


def normalize(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm < NORM_EPS):
        raise NearZeroVector(f"vector norm below {NORM_EPS}")
    # leave unit vectors untouched so that normalisation is idempotent
    norm = np.where(np.abs(norm - 1.0) <= 4 * np.finfo(float).eps, 1.0, norm)
    return v / norm


def canonicalize(v) -> np.ndarray:
    """Map a vector (or stack) to its hemisphere representative.

    The representative has z > 0, or z == 0 and y > 0, or is (1, 0, 0).
    Input is normalised first, so ``canonicalize(v) == canonicalize(-v)``.
    """
    u = normalize(v)
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    flip = (z < 0) | ((z == 0) & ((y < 0) | ((y == 0) & (x < 0))))
    u = np.where(flip[..., None], -u, u)
    # normalise negative zeros so equal axes compare bitwise equal
    return u + 0.0


def is_canonical(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    return (z > 0) | ((z == 0) & (y > 0)) | ((z == 0) & (y == 0) & (x == 1))


def _angle(cross_norm, dot, mode):
    if mode == SPHERICAL:
        return np.arctan2(cross_norm, dot)
    if mode == AXIAL:
        return np.arctan2(cross_norm, np.abs(dot))
    raise ValueError(f"unknown metric mode {mode!r}")


def geodesic_distance(u, v, mode: str = AXIAL) -> np.ndarray:
    """Great-circle angle between unit vectors, in radians.

    ``spherical`` returns a value in [0, pi]; ``axial`` treats u and -u as
    the same axis and returns a value in [0, pi/2]. Computed as
    atan2(|u x v|, u.v), which equals arccos(u.v) for unit vectors but
    stays accurate for nearly parallel pairs.
    """
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    dot = np.sum(u * v, axis=-1)
    cross = np.linalg.norm(np.cross(u, v), axis=-1)
    return _angle(cross, dot, mode)


def pairwise_distance(points, mode: str = AXIAL) -> np.ndarray:
    """Full ``(n, n)`` matrix of geodesic distances within one sample."""
    p = np.asarray(points, dtype=float)
    dot = p @ p.T
    cross = np.linalg.norm(np.cross(p[:, None, :], p[None, :, :]), axis=-1)
    return _angle(cross, dot, mode)


def random_unit_vectors(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform sample on the full sphere."""
    g = rng.standard_normal((n, 3))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def rotation_to(axis) -> np.ndarray:
    """Rotation matrix taking (0, 0, 1) onto ``axis``."""
    a = normalize(axis)
    z = np.array([0.0, 0.0, 1.0])
    c = float(a @ z)
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    k = np.cross(z, a)
    s = np.linalg.norm(k)
    k = k / s
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + s * kx + (1 - c) * (kx @ kx)


def sample_vmf(rng: np.random.Generator, mean_axis, kappa: float, n: int) -> np.ndarray:
    """Draw ``n`` von Mises-Fisher samples on S^2.

    Uses the exact inverse CDF of the cosine to the mean direction, which
    is available in closed form on the 2-sphere. ``kappa == 0`` is uniform.
    """
    if kappa < 0:
        raise ValueError("kappa must be non-negative")
    u = rng.random(n)
    phi = rng.random(n) * 2.0 * np.pi
    if kappa < 1e-8:
        w = 2.0 * u - 1.0
    else:
        # w = 1 + log(u + (1 - u) exp(-2 kappa)) / kappa, stable for large kappa
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    r = np.sqrt(np.maximum(0.0, 1.0 - w * w))
    local = np.stack([r * np.cos(phi), r * np.sin(phi), w], axis=1)
    return local @ rotation_to(mean_axis).T
