"""Rotation-group and projective geometry primitives.

Conventions used throughout the package:

- Rotations are 3x3 row-major orthonormal matrices with det = +1.
- A RigidPose (R, t) maps child-frame points into the parent frame,
  x_parent = R @ x_child + t.  A camera pose is camera-to-world.
- The pinhole camera looks along +z of its own frame; pixel u grows with
  +x (width direction), pixel v with +y.  Distortion is assumed removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AngleNearPi,
    IntersectionBehindCamera,
    RayParallelToPlane,
)

# Below this angle (radians) exp/log switch to their Taylor-series branch.
SMALL_ANGLE = 1e-6

_ORTHO_TOL = 1e-9


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric (hat) matrix of a 3-vector."""
    v = np.asarray(v, dtype=float)
    return np.array(
        [
            [0.0, -v[2], v[1]],
            [v[2], 0.0, -v[0]],
            [-v[1], v[0], 0.0],
        ]
    )


def unskew(S: np.ndarray) -> np.ndarray:
    """Inverse of :func:`skew` (vee operator)."""
    return np.array([S[2, 1], S[0, 2], S[1, 0]])


@dataclass(frozen=True)
class Rotation:
    """A rotation stored as its 3x3 matrix.

    The constructor validates orthonormality (R R^T = I and det R = +1,
    both within 1e-9), so a Rotation instance is always a valid group
    element.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (3, 3):
            raise ValueError(f"rotation matrix must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("rotation matrix has non-finite entries")
        err = np.abs(m @ m.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"matrix is not orthonormal (|R R^T - I| = {err:.3g})")
        if abs(np.linalg.det(m) - 1.0) > 1e-6:
            raise ValueError("matrix determinant is not +1")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def about_axis(cls, axis: np.ndarray, angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=float)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("axis must be nonzero")
        return so3_exp(axis / n * angle)

    def __matmul__(self, other: "Rotation") -> "Rotation":
        return Rotation(self.matrix @ other.matrix)

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Rotate one vector (3,) or a stack (..., 3)."""
        return np.asarray(v, dtype=float) @ self.matrix.T

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def angle(self) -> float:
        """Rotation angle in [0, pi]."""
        c = (np.trace(self.matrix) - 1.0) / 2.0
        return float(math.acos(min(1.0, max(-1.0, c))))


@dataclass(frozen=True)
class RigidPose:
    """Rigid transform: x_parent = rotation @ x_child + translation."""

    rotation: Rotation
    translation: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation has non-finite entries")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(Rotation.identity(), np.zeros(3))

    def transform(self, x: np.ndarray) -> np.ndarray:
        """Map child-frame point(s) (..., 3) into the parent frame."""
        return self.rotation.apply(x) + self.translation

    def inverse(self) -> "RigidPose":
        rinv = self.rotation.inverse()
        return RigidPose(rinv, -rinv.apply(self.translation))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self o other: first apply `other`, then `self`."""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation.apply(other.translation) + self.translation,
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidPose":
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        return cls(Rotation(m[:3, :3]), m[:3, 3])


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels; distortion already removed."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")


@dataclass(frozen=True)
class Ray:
    """Half-line with unit direction."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"direction must be unit length (|d| = {n})")
        o.setflags(write=False)
        d.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d)


def so3_exp(v: np.ndarray) -> Rotation:
    """Exponential map R^3 -> SO(3) (Rodrigues).

    exp(0) is exactly the identity; below SMALL_ANGLE a fourth-order
    Taylor expansion of sin(t)/t and (1-cos t)/t^2 is used.
    """
    v = np.asarray(v, dtype=float).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError("rotation vector has non-finite entries")
    theta2 = float(v @ v)
    theta = math.sqrt(theta2)
    K = skew(v)
    if theta < SMALL_ANGLE:
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta2
    return Rotation(np.eye(3) + a * K + b * (K @ K))


def so3_log(R: Rotation) -> np.ndarray:
    """Logarithm map SO(3) -> R^3 on the principal branch.

    Raises AngleNearPi when the rotation angle is within 1e-6 of pi,
    where the branch is ill-conditioned.
    """
    m = R.matrix
    c = (np.trace(m) - 1.0) / 2.0
    theta = math.acos(min(1.0, max(-1.0, c)))
    if theta > math.pi - 1e-6:
        raise AngleNearPi(f"rotation angle {theta:.9f} is within 1e-6 of pi")
    w = unskew((m - m.T) / 2.0)
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6; invert to first order.
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / math.sin(theta))


def pixel_ray(
    intr: CameraIntrinsics, pose_cam_to_world: RigidPose, u: float, v: float
) -> Ray:
    """World-frame viewing ray through pixel (u, v); sub-pixel values allowed."""
    d_cam = np.array([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, 1.0])
    d_world = pose_cam_to_world.rotation.apply(d_cam)
    d_world = d_world / np.linalg.norm(d_world)
    return Ray(pose_cam_to_world.translation, d_world)


def pixel_rays(
    intr: CameraIntrinsics, pose_cam_to_world: RigidPose, uv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized pixel_ray: uv (N, 2) -> (origin (3,), directions (N, 3))."""
    uv = np.asarray(uv, dtype=float)
    d = np.stack(
        [
            (uv[:, 0] - intr.cx) / intr.fx,
            (uv[:, 1] - intr.cy) / intr.fy,
            np.ones(len(uv)),
        ],
        axis=1,
    )
    d = d @ pose_cam_to_world.rotation.matrix.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return pose_cam_to_world.translation.copy(), d


def ray_plane_intersect(
    ray: Ray, plane_point: np.ndarray, plane_normal: np.ndarray
) -> np.ndarray:
    """Intersection of a ray with the plane through plane_point.

    Raises RayParallelToPlane when |d . n| <= 1e-9 and
    IntersectionBehindCamera when the ray parameter t <= 0.
    """
    plane_point = np.asarray(plane_point, dtype=float)
    plane_normal = np.asarray(plane_normal, dtype=float)
    denom = float(ray.direction @ plane_normal)
    if abs(denom) <= 1e-9:
        raise RayParallelToPlane("ray direction is parallel to the plane")
    t = float((plane_point - ray.origin) @ plane_normal) / denom
    if t <= 0.0:
        raise IntersectionBehindCamera(f"intersection parameter t = {t:.6g} <= 0")
    return ray.origin + t * ray.direction


def look_at_pose(
    eye: np.ndarray, target: np.ndarray, up: np.ndarray = (0.0, 1.0, 0.0)
) -> RigidPose:
    """Camera-to-world pose with +z pointing from eye toward target.

    `up` picks the camera's +y (image-down) direction; it must not be
    collinear with the viewing direction.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    zn = np.linalg.norm(z)
    if zn == 0.0:
        raise ValueError("eye and target coincide")
    z = z / zn
    up = np.asarray(up, dtype=float)
    x = np.cross(up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise ValueError("up direction is collinear with the view direction")
    x = x / xn
    y = np.cross(z, x)
    return RigidPose(Rotation(np.stack([x, y, z], axis=1)), eye)


def rotation_angle_between(a: Rotation, b: Rotation) -> float:
    """Geodesic angle between two rotations, radians."""
    return (a.inverse() @ b).angle()
