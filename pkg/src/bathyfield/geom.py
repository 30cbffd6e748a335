"""Double-precision geometric primitives: rays, planes, boxes, refraction,
similarity transforms and least-squares plane fitting.

Everything in this module is plain numpy float64 and free of any learning
machinery, so it can serve as the ground-truth reference for the torch-side
implementations used during rendering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

UNIT_TOL = 1e-9


class TotalInternalReflection(ValueError):
    """Raised when Snell's law has no transmitted solution."""


class DegenerateGeometry(ValueError):
    """Raised when an estimation problem is rank-deficient (e.g. collinear
    points handed to the plane fit)."""


def as_vec3(x) -> np.ndarray:
    """Coerce to a float64 array whose trailing dimension is 3."""
    v = np.asarray(x, dtype=np.float64)
    if v.shape[-1] != 3:
        raise ValueError(f"expected trailing dimension 3, got shape {v.shape}")
    return v


def normalize(v) -> np.ndarray:
    """Return v scaled to unit Euclidean norm (last axis)."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n < 1e-300):
        raise ValueError("cannot normalize a zero vector")
    return v / n


def _check_unit(v: np.ndarray, name: str) -> None:
    err = abs(float(np.linalg.norm(v)) - 1.0)
    if err > UNIT_TOL:
        raise ValueError(f"{name} must be unit length (|norm - 1| = {err:.3g})")


@dataclass(frozen=True)
class Ray:
    """A ray origin + unit direction with a valid parameter interval."""

    origin: np.ndarray
    direction: np.ndarray
    t_near: float = 0.0
    t_far: float = np.inf

    def __post_init__(self):
        object.__setattr__(self, "origin", as_vec3(self.origin))
        object.__setattr__(self, "direction", as_vec3(self.direction))
        _check_unit(self.direction, "ray direction")
        if not self.t_near <= self.t_far:
            raise ValueError(f"empty ray interval [{self.t_near}, {self.t_far}]")

    def at(self, t) -> np.ndarray:
        """Point on the ray at parameter t (scalar or array)."""
        t = np.asarray(t, dtype=np.float64)
        return self.origin + t[..., None] * self.direction


@dataclass(frozen=True)
class WaterPlane:
    """Oriented plane {x : normal . x = intercept} separating two media.

    The normal points out of the water (towards the cameras); refractive
    indices ride along so downstream code never hardcodes them.
    """

    normal: np.ndarray
    intercept: float
    n_air: float = 1.0
    n_water: float = 1.333

    def __post_init__(self):
        object.__setattr__(self, "normal", as_vec3(self.normal))
        object.__setattr__(self, "intercept", float(self.intercept))
        _check_unit(self.normal, "plane normal")
        if self.n_air <= 0 or self.n_water <= 0:
            raise ValueError("refractive indices must be positive")

    def signed_distance(self, x) -> np.ndarray:
        """Positive on the normal (air) side of the plane."""
        return as_vec3(x) @ self.normal - self.intercept


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by componentwise min/max corners."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "min", as_vec3(self.min))
        object.__setattr__(self, "max", as_vec3(self.max))
        if not np.all(self.min <= self.max):
            raise ValueError("Aabb min must be <= max componentwise")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def size(self) -> np.ndarray:
        return self.max - self.min

    def contains(self, x) -> np.ndarray:
        x = as_vec3(x)
        return np.all((x >= self.min) & (x <= self.max), axis=-1)

    def padded(self, margin: float) -> "Aabb":
        return Aabb(self.min - margin, self.max + margin)


@dataclass(frozen=True)
class SimilarityTransform:
    """Map x -> rotation @ (scale * x) + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.max(np.abs(R @ R.T - np.eye(3))) > 1e-9:
            raise ValueError("rotation must be orthonormal")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", as_vec3(self.translation))
        object.__setattr__(self, "scale", float(self.scale))
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @staticmethod
    def identity() -> "SimilarityTransform":
        return SimilarityTransform(np.eye(3), np.zeros(3), 1.0)


def apply_similarity(transform: SimilarityTransform, x) -> np.ndarray:
    """Apply the transform to one point or an (..., 3) array of points."""
    x = as_vec3(x)
    return (transform.scale * x) @ transform.rotation.T + transform.translation


def invert_similarity(transform: SimilarityTransform) -> SimilarityTransform:
    """Exact inverse; apply(invert(T), apply(T, x)) == x up to roundoff."""
    R_inv = transform.rotation.T
    s_inv = 1.0 / transform.scale
    t_inv = -s_inv * (R_inv @ transform.translation)
    return SimilarityTransform(R_inv, t_inv, s_inv)


def compose_similarity(outer: SimilarityTransform,
                       inner: SimilarityTransform) -> SimilarityTransform:
    """Transform equal to applying `inner` first, then `outer`."""
    R = outer.rotation @ inner.rotation
    s = outer.scale * inner.scale
    t = outer.scale * (outer.rotation @ inner.translation) + outer.translation
    return SimilarityTransform(R, t, s)


def refract(direction, normal, n_from: float, n_to: float) -> np.ndarray:
    """Refract a unit direction through a plane with unit normal.

    The normal is flipped if needed so that it opposes the incoming
    direction (cos(theta_i) = -n.d >= 0); callers may pass either
    orientation.  Raises TotalInternalReflection when Snell's law admits
    no transmitted ray.

    Returns:
        Unit transmitted direction.
    """
    d = as_vec3(direction)
    n = as_vec3(normal)
    _check_unit(d, "direction")
    _check_unit(n, "normal")
    cos_i = -float(n @ d)
    if cos_i < 0.0:
        n = -n
        cos_i = -cos_i
    eta = n_from / n_to
    k = 1.0 - eta * eta * (1.0 - cos_i * cos_i)
    if k < 0.0:
        sin_i = np.sqrt(max(0.0, 1.0 - cos_i * cos_i))
        crit = np.degrees(np.arcsin(min(1.0, n_to / n_from)))
        raise TotalInternalReflection(
            f"sin(theta_i) = {sin_i:.6f} exceeds critical angle {crit:.3f} deg "
            f"for n {n_from} -> {n_to}")
    t = eta * d + (eta * cos_i - np.sqrt(k)) * n
    return normalize(t)


def intersect_ray_plane(ray: Ray, plane: WaterPlane) -> float | None:
    """Parameter of the ray/plane intersection, or None.

    None is returned for rays parallel to the plane (|n.d| < 1e-12) and for
    hits outside [t_near, t_far].
    """
    denom = float(plane.normal @ ray.direction)
    if abs(denom) < 1e-12:
        return None
    t = (plane.intercept - float(plane.normal @ ray.origin)) / denom
    if t < ray.t_near or t > ray.t_far:
        return None
    return t


def intersect_ray_aabb(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    """Entry/exit parameters of the ray against the box via the slab method.

    The returned interval is clipped to [t_near, t_far]; None means the
    (clipped) ray misses the box.
    """
    o, d = ray.origin, ray.direction
    t0, t1 = ray.t_near, ray.t_far
    for axis in range(3):
        if abs(d[axis]) < 1e-300:
            if o[axis] < box.min[axis] or o[axis] > box.max[axis]:
                return None
            continue
        inv = 1.0 / d[axis]
        ta = (box.min[axis] - o[axis]) * inv
        tb = (box.max[axis] - o[axis]) * inv
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    return t0, t1


def kinked_position(ray: Ray, t, t_interface: float, dir_water) -> np.ndarray:
    """Position along a refracted ray parameterized by cumulative path length.

    Before the interface (t <= t_interface) the point lies on the straight
    ray; past it the path continues from the interface hit along dir_water.
    """
    t = np.asarray(t, dtype=np.float64)
    dir_water = as_vec3(dir_water)
    p_hit = ray.origin + t_interface * ray.direction
    straight = ray.origin + t[..., None] * ray.direction
    bent = p_hit + np.maximum(t - t_interface, 0.0)[..., None] * dir_water
    return np.where((t <= t_interface)[..., None], straight, bent)


def fit_plane_lsq(points, n_air: float = 1.0, n_water: float = 1.333
                  ) -> WaterPlane:
    """Total-least-squares plane through 3D points.

    The normal is the eigenvector of the centered covariance with smallest
    eigenvalue, sign-adjusted so normal . (0,0,1) >= 0.  Unweighted, no
    outlier rejection: callers are expected to pass vetted markers.

    Raises:
        DegenerateGeometry: fewer than 3 points, or the two smallest
            covariance eigenvalues coincide (collinear input).
    """
    pts = as_vec3(points)
    if pts.ndim != 2 or pts.shape[0] < 3:
        raise DegenerateGeometry("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered
    eigval, eigvec = np.linalg.eigh(cov)
    # eigh sorts ascending; a collinear cloud leaves the two smallest
    # eigenvalues both (numerically) zero and the normal undefined.
    scale = max(float(eigval[-1]), 1.0)
    if eigval[1] - eigval[0] <= 1e-12 * scale:
        raise DegenerateGeometry(
            f"points are collinear within tolerance (eigenvalues {eigval})")
    normal = eigvec[:, 0]
    if normal[2] < 0.0 or (normal[2] == 0.0 and (normal[1] < 0.0 or (
            normal[1] == 0.0 and normal[0] < 0.0))):
        normal = -normal
    normal = normalize(normal)
    return WaterPlane(normal, float(normal @ centroid), n_air, n_water)


def rotation_plane_to_z(normal) -> np.ndarray:
    """Minimal rotation carrying a unit normal onto +z.

    Uses the Rodrigues formula about axis normal x z; the antiparallel case
    falls back to a 180 degree rotation about x.
    """
    n = as_vec3(normal)
    _check_unit(n, "normal")
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(n, z)
    s = float(np.linalg.norm(axis))
    c = float(n @ z)
    if s < 1e-12:
        if c > 0.0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])
    k = axis / s
    kx = np.array([[0.0, -k[2], k[1]],
                   [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    return np.eye(3) + s * kx + (1.0 - c) * (kx @ kx)


def rotation_from_axis_angle(r) -> np.ndarray:
    """Rotation matrix for an axis-angle vector (angle = |r|, radians)."""
    r = as_vec3(r)
    theta = float(np.linalg.norm(r))
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0.0, -k[2], k[1]],
                   [k[2], 0.0, -k[0]],
                   [-k[1], k[0], 0.0]])
    return np.eye(3) + np.sin(theta) * kx + (1.0 - np.cos(theta)) * (kx @ kx)
