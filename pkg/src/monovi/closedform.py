"""Linear bootstrap for velocity, gravity and feature depths.

Orientations come from gyro integration. With those fixed, keyframe
positions are affine in the first velocity and gravity (both in the first
IMU frame), and every bearing observation of a feature in a non-anchor
keyframe gives two equations linear in ``[v0, g, depth_i]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import EmptySegment, InsufficientData
from .geometry import UnitQuaternion, so3_exp
from .imu import preintegrate
from .state import Feature, InitWindow, KeyframeState, ScaleShift

DEGENERATE_CONDITION = 1e12
FALLBACK_DEPTH = 5.0


def integrate_rotations(imu_segments, bg0=None, noise=None):
    """Keyframe orientations relative to the first keyframe."""
    bg0 = np.zeros(3) if bg0 is None else np.asarray(bg0, dtype=float)
    out = [UnitQuaternion.identity()]
    R = np.eye(3)
    for seg in imu_segments:
        if len(seg) < 2:
            raise EmptySegment("segment has fewer than two IMU samples")
        R = R @ preintegrate(seg, np.zeros(3), bg0, noise).delta_R
        out.append(UnitQuaternion.from_matrix(R))
    return out


def gravity_alignment(g):
    """Rotation taking ``g`` onto ``-z`` with no rotation about the vertical."""
    a = -np.asarray(g, dtype=float) / np.linalg.norm(g)
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(a, z)
    s = np.linalg.norm(axis)
    c = float(a @ z)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        return np.diag([1.0, -1.0, -1.0])
    return so3_exp(axis / s * math.atan2(s, c))


@dataclass
class LinearInit:
    states: list  # KeyframeState in the gravity-aligned frame
    features: list  # Feature
    scale_shifts: list
    gravity_kf0: np.ndarray  # estimated gravity in the first IMU frame (rescaled)
    v0: np.ndarray  # first velocity, first IMU frame
    depths: np.ndarray  # anchor-camera depths before fallback replacement
    condition: float
    degenerate: bool
    residual_norm: float


def _position_chain(preints, rotations):
    """Known parts of positions/velocities: ``p_k = v0 t_k + g t_k^2 / 2 + c_k``."""
    n = len(rotations)
    t = np.zeros(n)
    c = np.zeros((n, 3))
    e = np.zeros((n, 3))
    for k, pre in enumerate(preints):
        dt = pre.dt_total
        Rk = rotations[k]
        t[k + 1] = t[k] + dt
        c[k + 1] = c[k] + e[k] * dt + Rk @ pre.delta_p
        e[k + 1] = e[k] + Rk @ pre.delta_v
    return t, c, e


def linear_system(window: InitWindow, rotations, preints, features, depth_rows=False):
    """Rows ``A x = y`` over ``x = [v0, g, d_1..d_M]``.

    With ``depth_rows`` also returns ``(Z, z0, q)``: ``Z x + z0`` is the
    depth of each row's point in the observing camera (the factor multiplying
    the observed coordinate) and ``q * d_i**2`` the row's sensitivity to
    noise on the anchor bearing.
    """
    R = [q.matrix() if isinstance(q, UnitQuaternion) else np.asarray(q) for q in rotations]
    t, c, _ = _position_chain(preints, R)
    R_c = window.extrinsics.R
    p_c = window.extrinsics.translation
    M = len(features)
    rows, rhs, zrows, z0, q = [], [], [], [], []
    for i, f in enumerate(features):
        j = f.anchor_kf
        bearing = np.array([f.u, f.v, 1.0])
        ray = R[j] @ R_c @ bearing
        lateral = R[j] @ R_c[:, :2]
        for o in f.observations:
            k = o.keyframe
            if k == j:
                continue
            Mk = R_c.T @ R[k].T
            coef_v = Mk * (t[j] - t[k])
            coef_g = Mk * 0.5 * (t[j] ** 2 - t[k] ** 2)
            coef_d = Mk @ ray
            const = Mk @ (c[j] - c[k] + R[j] @ p_c) - R_c.T @ p_c
            u, v = window.camera.normalize(o.pixel)
            zr = np.zeros(6 + M)
            zr[0:3], zr[3:6], zr[6 + i] = coef_v[2], coef_g[2], coef_d[2]
            zrows += [zr, zr]
            z0 += [const[2], const[2]]
            for sel in (np.array([1.0, 0.0, -u]), np.array([0.0, 1.0, -v])):
                q.append(float(np.sum((sel @ Mk @ lateral) ** 2)))
                row = np.zeros(6 + M)
                row[0:3] = sel @ coef_v
                row[3:6] = sel @ coef_g
                row[6 + i] = sel @ coef_d
                rows.append(row)
                rhs.append(-(sel @ const))
    A, y = np.array(rows).reshape(-1, 6 + M), np.array(rhs)
    if depth_rows:
        return A, y, np.array(zrows).reshape(-1, 6 + M), np.array(z0), np.array(q)
    return A, y


def features_from_tracks(window: InitWindow, min_observations=2):
    """Anchor each track at its first keyframe with the observed bearing; w=1."""
    feats = []
    for tr in window.tracks:
        obs = tuple(sorted(tr.observations, key=lambda o: o.keyframe))
        if len({o.keyframe for o in obs}) < min_observations:
            continue
        u, v = window.camera.normalize(obs[0].pixel)
        feats.append(Feature(tr.feature_id, obs[0].keyframe, float(u), float(v), 1.0, obs))
    return feats


def solve_linear_init(window: InitWindow, rotations=None, preints=None) -> LinearInit:
    """Least-squares bootstrap; the result is expressed in a gravity-aligned frame."""
    if preints is None:
        preints = [preintegrate(seg, noise=window.noise) for seg in window.imu_segments]
    if rotations is None:
        rotations = integrate_rotations(window.imu_segments, noise=window.noise)
    features = features_from_tracks(window)
    if len(features) < 3:
        raise InsufficientData(f"only {len(features)} features are observed in two or more keyframes")
    A, y = linear_system(window, rotations, preints, features)
    sv = np.linalg.svd(A, compute_uv=False)
    condition = math.inf if sv[-1] <= 0 else float((sv[0] / sv[-1]) ** 2)
    degenerate = not condition <= DEGENERATE_CONDITION
    x = np.linalg.lstsq(A, y, rcond=None)[0]
    g = x[3:6]
    gnorm = np.linalg.norm(g)
    if gnorm < 1e-9:
        g = np.array([0.0, 0.0, -window.gravity_magnitude])
    else:
        g = g / gnorm * window.gravity_magnitude
    # re-solve velocity and depths with gravity pinned to its rescaled value
    keep = np.r_[0:3, 6 : A.shape[1]]
    x2 = np.linalg.lstsq(A[:, keep], y - A[:, 3:6] @ g, rcond=None)[0]
    v0 = x2[:3]
    depths = x2[3:]
    residual_norm = float(np.linalg.norm(A[:, keep] @ x2 + A[:, 3:6] @ g - y))

    good = np.isfinite(depths) & (depths > 0)
    fill = float(np.median(depths[good])) if np.any(good) else FALLBACK_DEPTH
    used = np.where(good, depths, fill)
    features = [f.with_uvw((f.u, f.v, 1.0 / d)) for f, d in zip(features, used)]

    R_align = gravity_alignment(g)
    Rk = [q.matrix() if isinstance(q, UnitQuaternion) else np.asarray(q) for q in rotations]
    t, c, e = _position_chain(preints, Rk)
    states = []
    for k, ts in enumerate(window.timestamps):
        p = v0 * t[k] + 0.5 * g * t[k] ** 2 + c[k]
        v = v0 + g * t[k] + e[k]
        states.append(
            KeyframeState(UnitQuaternion.from_matrix(R_align @ Rk[k]), R_align @ p, R_align @ v, np.zeros(3), np.zeros(3), ts)
        )
    scale_shifts = [ScaleShift.prior() for _ in window.timestamps]
    return LinearInit(states, features, scale_shifts, g, v0, depths, condition, degenerate, residual_norm)
