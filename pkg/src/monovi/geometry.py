"""Rotation/pose algebra and the pinhole projection model.

Quaternions follow the Hamilton convention and are stored ``(w, x, y, z)``.
Rotations in states map body (IMU) coordinates to the global frame.
Perturbations on rotations are applied on the right: ``R <- R Exp(dtheta)``.

Most helpers accept a leading batch dimension so the residual code can
evaluate hundreds of observations at once.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonPositiveDepth

_SMALL_ANGLE = 1e-8


def skew(v):
    """Cross-product matrix, batched over leading dims."""
    v = np.asarray(v, dtype=float)
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def so3_exp(phi):
    """Rodrigues formula; ``phi`` has shape (..., 3)."""
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    K = skew(phi)
    return np.eye(3) + a * K + b * (K @ K)


def so3_log(R):
    """Inverse of :func:`so3_exp` via the quaternion of ``R`` (robust near pi)."""
    q = matrix_to_quat(R)
    return quat_log(q)


def right_jacobian(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 0.5 - theta2 / 24.0, (1.0 - np.cos(safe)) / (safe * safe))
    b = np.where(small, 1.0 / 6.0 - theta2 / 120.0, (safe - np.sin(safe)) / (safe**3))
    K = skew(phi)
    return np.eye(3) - a * K + b * (K @ K)


def right_jacobian_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta2 = np.sum(phi * phi, axis=-1)[..., None, None]
    theta = np.sqrt(theta2)
    small = theta < 1e-5
    safe = np.where(small, 1.0, theta)
    c = np.where(
        small,
        1.0 / 12.0 + theta2 / 720.0,
        1.0 / (safe * safe) - (1.0 + np.cos(safe)) / (2.0 * safe * np.sin(safe)),
    )
    K = skew(phi)
    return np.eye(3) + 0.5 * K + c * (K @ K)


# --- quaternion arrays (w, x, y, z) ---------------------------------------


def quat_normalize(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    return np.where(q[..., :1] < 0.0, -q, q)


def quat_multiply(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_exp_array(phi):
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # sin(theta/2)/theta, series 1/2 - theta^2/48 below the cutoff
    k = np.where(small, 0.5 - theta * theta / 48.0, np.sin(half) / safe)
    w = np.where(small, 1.0 - theta * theta / 8.0, np.cos(half))
    return np.concatenate([w, k * phi], axis=-1)


def quat_log(q):
    q = quat_normalize(q)
    w = np.clip(q[..., :1], -1.0, 1.0)
    vec = q[..., 1:]
    n = np.linalg.norm(vec, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(n, w)
    small = n < 1e-12
    safe = np.where(small, 1.0, n)
    scale = np.where(small, 2.0 / np.where(small, w, 1.0), angle / safe)
    return scale * vec


def quat_to_matrix(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def matrix_to_quat(R):
    """Shepperd's method, batched."""
    R = np.asarray(R, dtype=float)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    out = np.empty((Rf.shape[0], 4))
    for i, m in enumerate(Rf):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = 2.0 * np.sqrt(tr + 1.0)
            out[i] = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
            out[i] = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
        elif m[1, 1] > m[2, 2]:
            s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
            out[i] = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
        else:
            s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
            out[i] = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(out).reshape(batch + (4,))


# --- value types ----------------------------------------------------------


@dataclass(frozen=True)
class UnitQuaternion:
    """Hamilton unit quaternion, canonicalized to ``w >= 0``."""

    w: float = 1.0
    x: float = 0.0
    y: float = 0.0
    z: float = 0.0

    def __post_init__(self):
        q = quat_normalize(np.array([self.w, self.x, self.y, self.z], dtype=float))
        for name, value in zip("wxyz", q):
            object.__setattr__(self, name, float(value))

    @classmethod
    def identity(cls):
        return cls(1.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_array(cls, q):
        return cls(*np.asarray(q, dtype=float))

    @classmethod
    def from_matrix(cls, R):
        return cls.from_array(matrix_to_quat(R))

    @classmethod
    def exp(cls, omega):
        return quat_exp(omega)

    def as_array(self):
        return np.array([self.w, self.x, self.y, self.z])

    def matrix(self):
        return quat_to_matrix(self.as_array())

    def conjugate(self):
        return UnitQuaternion(self.w, -self.x, -self.y, -self.z)

    inverse = conjugate

    def log(self):
        return quat_log(self.as_array())

    def rotate(self, v):
        return self.matrix() @ np.asarray(v, dtype=float)

    def __mul__(self, other):
        if not isinstance(other, UnitQuaternion):
            return NotImplemented
        return UnitQuaternion.from_array(quat_multiply(self.as_array(), other.as_array()))


def quat_exp(omega) -> UnitQuaternion:
    """Rotation by ``|omega|`` about ``omega/|omega|``."""
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (3,) or not np.all(np.isfinite(omega)):
        raise ValueError("omega must be a finite 3-vector")
    return UnitQuaternion.from_array(quat_exp_array(omega))


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform; maps points from the local frame into the parent frame."""

    rotation: UnitQuaternion = field(default_factory=UnitQuaternion.identity)
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        t = np.array(self.translation, dtype=float).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(UnitQuaternion.from_matrix(T[:3, :3]), T[:3, 3])

    @property
    def R(self):
        return self.rotation.matrix()

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def inverse(self):
        Rt = self.R.T
        return Pose(self.rotation.conjugate(), -Rt @ self.translation)

    def transform(self, point):
        return self.R @ np.asarray(point, dtype=float) + self.translation

    def __mul__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return Pose(self.rotation * other.rotation, self.R @ other.translation + self.translation)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return self.rotation == other.rotation and np.array_equal(self.translation, other.translation)

    __hash__ = None


def transform_point(pose: Pose, point):
    return pose.transform(point)


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def project(self, point_c):
        return project(self, point_c)

    def unproject(self, pixel, depth):
        u, v = self.normalize(pixel)
        return depth * np.array([u, v, 1.0])

    def normalize(self, pixel):
        """Pixel -> normalized image-plane coordinates."""
        pixel = np.asarray(pixel, dtype=float)
        return np.stack([(pixel[..., 0] - self.cx) / self.fx, (pixel[..., 1] - self.cy) / self.fy], axis=-1)

    def denormalize(self, uv):
        uv = np.asarray(uv, dtype=float)
        return np.stack([self.fx * uv[..., 0] + self.cx, self.fy * uv[..., 1] + self.cy], axis=-1)

    def contains(self, pixel, margin=0.0):
        pixel = np.asarray(pixel, dtype=float)
        return (
            (pixel[..., 0] >= margin)
            & (pixel[..., 0] <= self.width - 1 - margin)
            & (pixel[..., 1] >= margin)
            & (pixel[..., 1] <= self.height - 1 - margin)
        )


def project(camera: PinholeCamera, point_c):
    point_c = np.asarray(point_c, dtype=float)
    if point_c[2] <= 1e-9:
        raise NonPositiveDepth(f"point has depth {point_c[2]!r}")
    return np.array(
        [camera.fx * point_c[0] / point_c[2] + camera.cx, camera.fy * point_c[1] / point_c[2] + camera.cy]
    )
