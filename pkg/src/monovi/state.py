"""Estimated quantities of the VI-BA problem and the input window."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import NonPositiveInverseDepth
from .geometry import PinholeCamera, Pose, UnitQuaternion, quat_to_matrix, skew

SCALE_EPS = 1e-5


@dataclass(frozen=True, eq=False)
class KeyframeState:
    """Pose (IMU to global), velocity and biases of one keyframe."""

    q: UnitQuaternion
    p: np.ndarray
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray
    timestamp: int

    def __post_init__(self):
        for name in ("p", "v", "ba", "bg"):
            arr = np.array(getattr(self, name), dtype=float).reshape(3)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "timestamp", int(self.timestamp))

    @property
    def R(self):
        return self.q.matrix()

    def pose(self) -> Pose:
        return Pose(self.q, self.p)

    def replace(self, **changes):
        return replace(self, **changes)

    def __eq__(self, other):
        if not isinstance(other, KeyframeState):
            return NotImplemented
        return (
            self.q == other.q
            and self.timestamp == other.timestamp
            and all(np.array_equal(getattr(self, n), getattr(other, n)) for n in ("p", "v", "ba", "bg"))
        )

    __hash__ = None


@dataclass(frozen=True)
class Observation:
    keyframe: int
    pixel: tuple  # (px, py)
    depth: Optional[float] = None  # raw mono inverse depth sampled at the pixel


@dataclass(frozen=True)
class Track:
    """Front-end output: one landmark's pixel observations inside a window."""

    feature_id: int
    observations: tuple

    def keyframes(self):
        return [o.keyframe for o in self.observations]


@dataclass(frozen=True)
class Feature:
    """Anchored inverse-depth point ``[u, v, w]`` in the anchor camera."""

    feature_id: int
    anchor_kf: int
    u: float
    v: float
    w: float
    observations: tuple = ()

    @property
    def uvw(self):
        return np.array([self.u, self.v, self.w])

    def with_uvw(self, uvw):
        return replace(self, u=float(uvw[0]), v=float(uvw[1]), w=float(uvw[2]))


def softplus(s):
    s = np.asarray(s, dtype=float)
    return np.logaddexp(0.0, s)


def sigmoid(s):
    s = np.asarray(s, dtype=float)
    return np.exp(-np.logaddexp(0.0, -s))


def scale_from_free(s):
    """``a = eps + log(1 + e^s)``; never reaches zero for finite ``s``."""
    out = SCALE_EPS + softplus(s)
    return float(out) if np.ndim(out) == 0 else out


def scale_derivative(s):
    out = sigmoid(s)
    return float(out) if np.ndim(out) == 0 else out


def free_from_scale(a):
    """Inverse of :func:`scale_from_free`; requires ``a > eps``."""
    x = np.asarray(a, dtype=float) - SCALE_EPS
    if np.any(x <= 0):
        raise ValueError("scale must exceed the softplus floor")
    # log(e^x - 1) = x + log(1 - e^-x)
    out = x + np.log(-np.expm1(-x))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class ScaleShift:
    s: float
    b: float

    @property
    def a(self):
        return scale_from_free(self.s)

    @classmethod
    def from_scale(cls, a, b):
        return cls(free_from_scale(a), float(b))

    @classmethod
    def prior(cls):
        return cls.from_scale(1.0, 0.0)


@dataclass(eq=False)
class InitWindow:
    """Everything the initializer consumes for one window of keyframes."""

    timestamps: list  # keyframe timestamps, ns
    imu_segments: list  # ImuData per consecutive keyframe pair
    tracks: list  # Track
    camera: PinholeCamera
    extrinsics: Pose  # camera to IMU
    noise: object  # imu.NoiseModel
    gravity_magnitude: float = 9.81
    depth_maps: Optional[list] = None  # monodepth.DepthMap per keyframe
    images: Optional[list] = None  # float arrays in [0, 1] per keyframe
    trailing_imu: object = None  # samples after the last keyframe, unused by the solver
    camera_rate: float = 10.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.timestamps) < 2:
            raise ValueError("a window needs at least two keyframes")
        if np.any(np.diff(np.asarray(self.timestamps, dtype=np.int64)) <= 0):
            raise ValueError("keyframe timestamps must be strictly increasing")
        if len(self.imu_segments) != len(self.timestamps) - 1:
            raise ValueError("need one IMU segment per keyframe pair")
        for k, seg in enumerate(self.imu_segments):
            if seg.timestamps[0] != self.timestamps[k] or seg.timestamps[-1] != self.timestamps[k + 1]:
                raise ValueError(f"IMU segment {k} does not span its keyframe pair")
        if not self.gravity_magnitude > 0:
            raise ValueError("gravity magnitude must be positive")

    @property
    def num_keyframes(self):
        return len(self.timestamps)

    @property
    def has_depth(self):
        return self.depth_maps is not None

    @property
    def keyframe_span(self):
        return (self.timestamps[-1] - self.timestamps[0]) * 1e-9

    @property
    def data_span(self):
        end = self.timestamps[-1]
        if self.trailing_imu is not None and len(self.trailing_imu):
            end = self.trailing_imu.timestamps[-1]
        return (end - self.timestamps[0]) * 1e-9


# --- Omega: feature point expressed in another keyframe's camera -----------


def point_in_camera_batch(uvw, R_j, p_j, R_k, p_k, R_c, p_c, jacobians=False):
    """Anchor-camera inverse-depth points mapped into target cameras.

    Shapes: ``uvw`` (n, 3), rotations (n, 3, 3), translations (n, 3); the
    extrinsics ``R_c, p_c`` are shared. Jacobians are taken w.r.t. right
    rotation perturbations and additive translation/feature increments.
    """
    uvw = np.asarray(uvw, dtype=float)
    w = uvw[:, 2:3]
    X_cj = np.concatenate([uvw[:, :2], np.ones_like(w)], axis=1) / w
    X_ij = X_cj @ R_c.T + p_c
    X_g = np.einsum("nab,nb->na", R_j, X_ij) + p_j
    X_ik = np.einsum("nba,nb->na", R_k, X_g - p_k)
    X_ck = (X_ik - p_c) @ R_c
    if not jacobians:
        return X_ck
    RcT_RkT = np.einsum("ab,nca->nbc", R_c, R_k)  # R_c^T R_k^T
    J_th_j = -np.einsum("nab,nbc,ncd->nad", RcT_RkT, R_j, skew(X_ij))
    J_p_j = RcT_RkT
    J_th_k = np.einsum("ba,nbc->nac", R_c, skew(X_ik))
    J_p_k = -RcT_RkT
    M = np.einsum("nab,nbc->nac", RcT_RkT, R_j) @ R_c
    inv_w = 1.0 / w[:, 0]
    d_cj = np.zeros((len(uvw), 3, 3))
    d_cj[:, 0, 0] = inv_w
    d_cj[:, 1, 1] = inv_w
    d_cj[:, :, 2] = -X_cj * inv_w[:, None]
    J_f = M @ d_cj
    return X_ck, {"theta_j": J_th_j, "p_j": J_p_j, "theta_k": J_th_k, "p_k": J_p_k, "feature": J_f}


def anchor_point(uvw, jacobians=False):
    """The anchor == target special case: exactly ``[u, v, 1] / w``."""
    uvw = np.atleast_2d(np.asarray(uvw, dtype=float))
    w = uvw[:, 2:3]
    X = np.concatenate([uvw[:, :2], np.ones_like(w)], axis=1) / w
    if not jacobians:
        return X
    inv_w = 1.0 / w[:, 0]
    J = np.zeros((len(uvw), 3, 3))
    J[:, 0, 0] = inv_w
    J[:, 1, 1] = inv_w
    J[:, :, 2] = -X * inv_w[:, None]
    return X, J


def feature_point_in_camera(f: Feature, anchor_pose: Pose, target_pose: Pose, extrinsics: Pose):
    """Feature ``f`` expressed in the target keyframe's camera frame (meters).

    The z component is the depth the mono-depth residual compares against.
    Poses map IMU to global; ``extrinsics`` maps camera to IMU.
    """
    if f.w <= 1e-9:
        raise NonPositiveInverseDepth(f"feature {f.feature_id} has inverse depth {f.w!r}")
    if anchor_pose == target_pose:
        return anchor_point(f.uvw)[0]
    R_c = extrinsics.R
    return point_in_camera_batch(
        f.uvw[None],
        anchor_pose.R[None],
        anchor_pose.translation[None],
        target_pose.R[None],
        target_pose.translation[None],
        R_c,
        extrinsics.translation,
    )[0]


def states_rotations(states):
    return quat_to_matrix(np.array([s.q.as_array() for s in states]))
