"""Geometric value types, rigid transforms and Monge-patch curvature.

A point cloud is a plain ``(N, 3)`` float array throughout the package;
:func:`as_cloud` is the single place where that contract is checked.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DEFAULT_EPS = 1e-6
SAMPLE_HALF_WIDTH = 0.5


def as_cloud(points, min_points: int = 1) -> np.ndarray:
    """Validate and return ``points`` as a float64 ``(N, 3)`` array."""
    cloud = np.asarray(points, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3:
        raise ValueError(f"expected an (N, 3) array of points, got shape {cloud.shape}")
    if cloud.shape[0] < min_points:
        raise ValueError(f"need at least {min_points} points, got {cloud.shape[0]}")
    if not np.all(np.isfinite(cloud)):
        raise ValueError("point coordinates must be finite")
    return cloud


def pairwise_sq_dists(points: np.ndarray) -> np.ndarray:
    """Squared distances over the last two axes of ``(..., N, 3)``.

    Computed from explicit differences rather than the Gram trick so the
    result is exactly symmetric and independent of how inputs are batched.
    """
    diff = points[..., :, None, :] - points[..., None, :, :]
    return np.sum(diff * diff, axis=-1)


def rotate(points: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Apply ``rotation`` (``(..., 3, 3)``) to row points ``(..., N, 3)``.

    Elementwise products keep results bit-identical under re-batching.
    """
    return np.sum(points[..., :, None, :] * rotation[..., None, :, :], axis=-1)


# ---------------------------------------------------------------------------
# rigid transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-12 or abs(np.linalg.det(R) - 1.0) > 1e-12:
            raise ValueError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def random(cls, rng: np.random.Generator, max_translation: float = 10.0) -> RigidTransform:
        return cls(random_rotation(rng), rng.uniform(-max_translation, max_translation, 3))

    def apply(self, points) -> np.ndarray:
        return apply_transform(points, self)

    def inverse(self) -> RigidTransform:
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: RigidTransform) -> RigidTransform:
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


def apply_transform(points, xf: RigidTransform) -> np.ndarray:
    cloud = np.asarray(points, dtype=np.float64)
    return cloud @ xf.rotation.T + xf.translation


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Haar-distributed rotation from the QR factorization of a Gaussian matrix."""
    Q, R = np.linalg.qr(rng.standard_normal((3, 3)))
    Q = Q * np.sign(np.diag(R))
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    return Q


def rotation_about_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_to_z(direction) -> np.ndarray:
    """Minimal-angle rotation taking ``direction`` onto the positive z-axis.

    Rodrigues form ``I + [v]x + [v]x^2 / (1 + cos)`` with ``v = d x z``.  The
    anti-parallel case has no unique axis; a half turn about x is used.
    """
    d = np.asarray(direction, dtype=np.float64)
    d = d / np.linalg.norm(d)
    cos = d[2]
    if 1.0 + cos < 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    v = np.array([d[1], -d[0], 0.0])  # d x z
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + cos)


# ---------------------------------------------------------------------------
# quadratic surfaces
# ---------------------------------------------------------------------------


class SurfaceClass(enum.IntEnum):
    PLANE = 0
    PARABOLIC = 1
    VALLEY = 2
    SADDLE = 3


class CurvaturePair(NamedTuple):
    gaussian: float
    mean: float
    mean_abs: float


@dataclass(frozen=True)
class QuadraticSurface:
    """Height field ``z = a x^2 + b y^2 + c x y + d x + e y``."""

    a: float
    b: float
    c: float
    d: float
    e: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.coefficients):
            raise ValueError("surface coefficients must be finite")

    @property
    def coefficients(self) -> tuple[float, float, float, float, float]:
        return (self.a, self.b, self.c, self.d, self.e)

    def height(self, x, y):
        return self.a * x * x + self.b * y * y + self.c * x * y + self.d * x + self.e * y

    def curvature(self, x: float = 0.0, y: float = 0.0) -> CurvaturePair:
        return monge_curvature(self, x, y)


def monge_curvature(s: QuadraticSurface, x: float = 0.0, y: float = 0.0) -> CurvaturePair:
    """Gaussian and mean curvature of the Monge patch at ``(x, y)``.

    The mean curvature is the average of the principal curvatures,
    ``H = (k1 + k2) / 2``; its sign follows the upward (+z) normal.
    """
    p = 2.0 * s.a * x + s.c * y + s.d
    q = 2.0 * s.b * y + s.c * x + s.e
    r, s2, t2 = 2.0 * s.a, s.c, 2.0 * s.b
    g = 1.0 + p * p + q * q
    K = (r * t2 - s2 * s2) / (g * g)
    H = ((1.0 + q * q) * r - 2.0 * p * q * s2 + (1.0 + p * p) * t2) / (2.0 * g**1.5)
    return CurvaturePair(float(K), float(H), float(abs(H)))


def classify_surface(k: CurvaturePair, eps: float = DEFAULT_EPS) -> SurfaceClass:
    if eps <= 0:
        raise ValueError("eps must be positive")
    if k.gaussian < -eps:
        return SurfaceClass.SADDLE
    if k.gaussian > eps:
        return SurfaceClass.PARABOLIC
    if abs(k.mean) <= eps:
        return SurfaceClass.PLANE
    return SurfaceClass.VALLEY


def sample_surface_points(s: QuadraticSurface, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` points of the surface over ``(x, y)`` uniform on ``[-0.5, 0.5]^2``."""
    if n < 3:
        raise ValueError("need at least 3 points")
    xy = rng.uniform(-SAMPLE_HALF_WIDTH, SAMPLE_HALF_WIDTH, size=(n, 2))
    z = s.height(xy[:, 0], xy[:, 1])
    return np.column_stack([xy, z])


def patch_radius(points: np.ndarray) -> np.ndarray:
    """Largest distance from the centroid; the reference length for noise levels."""
    centered = points - points.mean(axis=-2, keepdims=True)
    return np.sqrt(np.max(np.sum(centered * centered, axis=-1), axis=-1))


def add_noise(points: np.ndarray, level: float, rng: np.random.Generator) -> np.ndarray:
    """Isotropic Gaussian noise with std ``level`` times the patch radius."""
    if level == 0:
        return np.array(points, dtype=np.float64, copy=True)
    scale = level * patch_radius(points)
    return points + rng.standard_normal(points.shape) * np.asarray(scale)[..., None, None]
