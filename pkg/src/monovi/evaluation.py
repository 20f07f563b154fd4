"""Trajectory metrics: Sim(3) alignment, scale error, position and gravity errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry
from .geometry import UnitQuaternion, quat_to_matrix
from .state import KeyframeState

GRAVITY_G = 9.81
LOW_MOTION_FRACTION = 0.005


@dataclass(eq=False)
class Trajectory:
    """Time-stamped states as flat arrays (IMU to global)."""

    timestamps: np.ndarray  # int64 ns
    p: np.ndarray
    q: np.ndarray  # (n, 4) wxyz
    v: np.ndarray
    ba: np.ndarray
    bg: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        n = len(self.timestamps)
        for name in ("p", "v", "ba", "bg"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=float).reshape(n, 3))
        self.q = np.asarray(self.q, dtype=float).reshape(n, 4)

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_states(cls, states):
        return cls(
            [s.timestamp for s in states],
            [s.p for s in states],
            [s.q.as_array() for s in states],
            [s.v for s in states],
            [s.ba for s in states],
            [s.bg for s in states],
        )

    def index_of(self, ts):
        idx = np.searchsorted(self.timestamps, ts)
        idx = np.asarray(idx)
        if np.any(idx >= len(self)) or np.any(self.timestamps[np.minimum(idx, len(self) - 1)] != ts):
            raise KeyError("timestamp not present in trajectory")
        return idx

    def state(self, i):
        return KeyframeState(
            UnitQuaternion.from_array(self.q[i]), self.p[i], self.v[i], self.ba[i], self.bg[i], int(self.timestamps[i])
        )

    def states_at(self, timestamps):
        return [self.state(int(i)) for i in self.index_of(np.asarray(timestamps, dtype=np.int64))]

    def rotations(self):
        return quat_to_matrix(self.q)


def _positions(poses):
    out = []
    for x in poses:
        if hasattr(x, "p"):
            out.append(np.asarray(x.p, dtype=float))
        elif hasattr(x, "translation"):
            out.append(np.asarray(x.translation, dtype=float))
        else:
            out.append(np.asarray(x, dtype=float))
    return np.array(out).reshape(-1, 3)


def sim3_align(est, gt):
    """Similarity ``(s, R, t)`` minimizing ``sum |gt - (s R est + t)|^2`` (Umeyama).

    Accepts states, poses or raw positions.
    """
    X = _positions(est)
    Y = _positions(gt)
    if len(X) != len(Y):
        raise ValueError("trajectories differ in length")
    if len(X) < 3:
        raise DegenerateGeometry("need at least three position pairs")
    mx, my = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - mx, Y - my
    var_x = float(np.sum(Xc**2)) / len(X)
    if var_x < 1e-18:
        raise DegenerateGeometry("estimated positions are coincident")
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] < 1e-9 * sx[0]:
        raise DegenerateGeometry("estimated positions are collinear")
    C = Yc.T @ Xc / len(X)
    U, S, Vt = np.linalg.svd(C)
    E = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        E[2, 2] = -1.0
    R = U @ E @ Vt
    s = float(np.trace(np.diag(S) @ E)) / var_x
    t = my - s * R @ mx
    return s, R, t


def scale_error_pct(s):
    if not s > 0:
        raise ValueError("scale must be positive")
    return abs(1.0 - s) * 100.0


def position_rmse(est, gt, alignment=None):
    X = _positions(est)
    Y = _positions(gt)
    if alignment is not None:
        s, R, t = alignment
        X = s * X @ R.T + t
    return float(np.sqrt(np.mean(np.sum((Y - X) ** 2, axis=1))))


def gravity_error_deg(est_first, gt_first):
    """Angle between the estimated and true global z axis seen from the first IMU frame."""
    ze = np.asarray(_rotation(est_first)).T[:, 2]
    zg = np.asarray(_rotation(gt_first)).T[:, 2]
    c = float(np.clip(ze @ zg, -1.0, 1.0))
    s = float(np.linalg.norm(np.cross(ze, zg)))
    return math.degrees(math.atan2(s, c))


def gravity_rmse_deg(est_states, gt_states):
    return gravity_error_deg(est_states[0], gt_states[0])


def _rotation(x):
    if hasattr(x, "R"):
        return x.R
    if isinstance(x, UnitQuaternion):
        return x.matrix()
    return np.asarray(x, dtype=float)


def mean_acceleration(times, positions=None, accelerations=None):
    """Time-averaged norm of linear acceleration (gravity excluded).

    ``times`` in seconds. Pass either world-frame accelerations sampled at
    those times or positions, which are differentiated twice.
    """
    t = np.asarray(times, dtype=float)
    if len(t) < 2:
        raise ValueError("need at least two samples")
    if accelerations is None:
        P = np.asarray(positions, dtype=float)
        if len(t) < 3:
            raise ValueError("need at least three positions to differentiate twice")
        accelerations = np.gradient(np.gradient(P, t, axis=0), t, axis=0)
    norms = np.linalg.norm(np.asarray(accelerations, dtype=float), axis=1)
    return float(np.trapezoid(norms, t) / (t[-1] - t[0]))


@dataclass(frozen=True)
class WindowMetrics:
    scale: float
    scale_error_pct: float
    position_rmse: float
    gravity_error_deg: float
    mean_acceleration: float

    @property
    def low_motion(self):
        return self.mean_acceleration < LOW_MOTION_FRACTION * GRAVITY_G


def evaluate_window(est_states, gt_states, mean_acc=float("nan")):
    s, R, t = sim3_align(est_states, gt_states)
    return WindowMetrics(
        scale=s,
        scale_error_pct=scale_error_pct(s),
        position_rmse=position_rmse(est_states, gt_states, (s, R, t)),
        gravity_error_deg=gravity_error_deg(est_states[0], gt_states[0]),
        mean_acceleration=mean_acc,
    )


def aggregate(metrics):
    """Means over windows; scale error only from windows above the low-motion threshold."""
    metrics = list(metrics)
    if not metrics:
        return {"windows": 0, "scale_error_pct": None, "position_rmse": None, "gravity_rmse_deg": None}
    scaled = [m.scale_error_pct for m in metrics if not m.low_motion]
    return {
        "windows": len(metrics),
        "scale_error_pct": float(np.mean(scaled)) if scaled else None,
        "position_rmse": float(np.mean([m.position_rmse for m in metrics])),
        "gravity_rmse_deg": float(np.sqrt(np.mean([m.gravity_error_deg**2 for m in metrics]))),
    }
