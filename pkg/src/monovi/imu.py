"""IMU preintegration and the inertial/bias-prior residuals.

Deltas are integrated with the midpoint rule in the body frame of the first
sample. Covariance and bias Jacobians are the first-order linearization of
that same discrete recursion, so they agree with finite differences of
:func:`preintegrate` itself.

The 15-dim inertial residual is ordered ``[rotation, velocity, position,
accel bias, gyro bias]``; state tangents are ordered ``[theta, p, v, ba, bg]``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .errors import EmptySegment, NonMonotonicTimestamps
from .geometry import UnitQuaternion, right_jacobian, right_jacobian_inv, skew, so3_exp, so3_log
from .state import KeyframeState

# tangent slices of a keyframe state
TH, POS, VEL, BA, BG = slice(0, 3), slice(3, 6), slice(6, 9), slice(9, 12), slice(12, 15)


@dataclass(frozen=True)
class ImuSample:
    timestamp: int  # ns
    gyro: tuple
    accel: tuple


@dataclass(eq=False)
class ImuData:
    """Array-of-samples container; rows share one timestamp each."""

    timestamps: np.ndarray  # int64 ns
    gyro: np.ndarray  # (n, 3) rad/s
    accel: np.ndarray  # (n, 3) m/s^2

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64).reshape(-1)
        self.gyro = np.asarray(self.gyro, dtype=float).reshape(-1, 3)
        self.accel = np.asarray(self.accel, dtype=float).reshape(-1, 3)
        if not (len(self.timestamps) == len(self.gyro) == len(self.accel)):
            raise ValueError("timestamp, gyro and accel rows must match")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def from_samples(cls, samples: Sequence[ImuSample]):
        if not samples:
            return cls(np.zeros(0, dtype=np.int64), np.zeros((0, 3)), np.zeros((0, 3)))
        return cls(
            np.array([s.timestamp for s in samples], dtype=np.int64),
            np.array([s.gyro for s in samples], dtype=float),
            np.array([s.accel for s in samples], dtype=float),
        )

    def samples(self):
        return [ImuSample(int(t), tuple(g), tuple(a)) for t, g, a in zip(self.timestamps, self.gyro, self.accel)]

    def slice_time(self, t0, t1):
        """Samples with ``t0 <= t <= t1``; endpoints are linearly interpolated if missing."""
        ts = self.timestamps
        if len(ts) == 0 or t0 < ts[0] or t1 > ts[-1]:
            raise EmptySegment(f"IMU data does not cover [{t0}, {t1}]")
        inside = (ts >= t0) & (ts <= t1)
        t = ts[inside]
        g = self.gyro[inside]
        a = self.accel[inside]
        if len(t) == 0 or t[0] != t0:
            g0, a0 = self._interp(t0)
            t, g, a = np.r_[t0, t], np.vstack([g0, g]), np.vstack([a0, a])
        if t[-1] != t1:
            g1, a1 = self._interp(t1)
            t, g, a = np.r_[t, t1], np.vstack([g, g1]), np.vstack([a, a1])
        return ImuData(t, g, a)

    def _interp(self, t):
        ts = self.timestamps.astype(float)
        g = np.array([np.interp(float(t), ts, self.gyro[:, i]) for i in range(3)])
        a = np.array([np.interp(float(t), ts, self.accel[:, i]) for i in range(3)])
        return g, a


@dataclass(frozen=True)
class NoiseModel:
    """Continuous-time densities. Defaults are EuRoC-like (ADIS16448)."""

    gyro_noise: float = 1.6968e-4  # rad/s/sqrt(Hz)
    accel_noise: float = 2.0e-3  # m/s^2/sqrt(Hz)
    gyro_walk: float = 1.9393e-5  # rad/s^2/sqrt(Hz)
    accel_walk: float = 3.0e-3  # m/s^3/sqrt(Hz)

    def __post_init__(self):
        for name in ("gyro_noise", "accel_noise", "gyro_walk", "accel_walk"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True, eq=False)
class PreintegratedImu:
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    covariance: np.ndarray  # 9x9 over (rotation, velocity, position)
    J_rg: np.ndarray
    J_va: np.ndarray
    J_vg: np.ndarray
    J_pa: np.ndarray
    J_pg: np.ndarray
    dt_total: float
    ba0: np.ndarray
    bg0: np.ndarray
    noise: NoiseModel

    @property
    def delta_q(self):
        return UnitQuaternion.from_matrix(self.delta_R)

    @property
    def bias_jacobians(self):
        return {"rot_bg": self.J_rg, "vel_ba": self.J_va, "vel_bg": self.J_vg, "pos_ba": self.J_pa, "pos_bg": self.J_pg}

    def corrected(self, ba, bg):
        """First-order bias update of the deltas."""
        dba = np.asarray(ba, dtype=float) - self.ba0
        dbg = np.asarray(bg, dtype=float) - self.bg0
        dR = self.delta_R @ so3_exp(self.J_rg @ dbg)
        dv = self.delta_v + self.J_va @ dba + self.J_vg @ dbg
        dp = self.delta_p + self.J_pa @ dba + self.J_pg @ dbg
        return dR, dv, dp

    def full_covariance(self):
        cov = np.zeros((15, 15))
        cov[:9, :9] = self.covariance
        cov[9:12, 9:12] = np.eye(3) * self.noise.accel_walk**2 * self.dt_total
        cov[12:15, 12:15] = np.eye(3) * self.noise.gyro_walk**2 * self.dt_total
        return cov

    def sqrt_information(self):
        """Upper-triangular ``W`` with ``W^T W = Sigma^-1``."""
        cov = self.full_covariance()
        cov = 0.5 * (cov + cov.T)
        L = cholesky(cov, lower=True)
        return solve_triangular(L, np.eye(15), lower=True)


def preintegrate(samples, ba0=None, bg0=None, noise: NoiseModel | None = None) -> PreintegratedImu:
    """Midpoint preintegration of one inter-keyframe IMU segment."""
    data = samples if isinstance(samples, ImuData) else ImuData.from_samples(list(samples))
    if len(data) < 2:
        raise EmptySegment("preintegration needs at least two samples")
    if np.any(np.diff(data.timestamps) <= 0):
        raise NonMonotonicTimestamps("IMU timestamps must be strictly increasing")
    noise = noise or NoiseModel()
    ba0 = np.zeros(3) if ba0 is None else np.asarray(ba0, dtype=float)
    bg0 = np.zeros(3) if bg0 is None else np.asarray(bg0, dtype=float)

    R = np.eye(3)
    v = np.zeros(3)
    p = np.zeros(3)
    cov = np.zeros((9, 9))
    J_rg = np.zeros((3, 3))
    J_va = np.zeros((3, 3))
    J_vg = np.zeros((3, 3))
    J_pa = np.zeros((3, 3))
    J_pg = np.zeros((3, 3))
    I3 = np.eye(3)
    A = np.eye(9)
    B = np.zeros((9, 6))

    t = data.timestamps
    for m in range(len(data) - 1):
        dt = (t[m + 1] - t[m]) * 1e-9
        dt2 = dt * dt
        w = 0.5 * (data.gyro[m] + data.gyro[m + 1]) - bg0
        a0 = data.accel[m] - ba0
        a1 = data.accel[m + 1] - ba0
        E = so3_exp(w * dt)
        Jr = right_jacobian(w * dt)
        R1 = R @ E
        a_mid = 0.5 * (R @ a0 + R1 @ a1)

        # d a_mid / d theta (error of R), including the propagated rotation error
        S0 = R @ skew(a0)
        S1 = R1 @ skew(a1)
        da_dth = -0.5 * (S0 + S1 @ E.T)
        da_dng = 0.5 * S1 @ Jr * dt  # gyro noise enters like -bg
        da_dna = -0.5 * (R + R1)

        A[:3, :3] = E.T
        A[3:6, :3] = da_dth * dt
        A[6:9, :3] = 0.5 * da_dth * dt2
        A[6:9, 3:6] = I3 * dt
        B[:3, :3] = -Jr * dt
        B[3:6, :3] = da_dng * dt
        B[6:9, :3] = 0.5 * da_dng * dt2
        B[3:6, 3:6] = da_dna * dt
        B[6:9, 3:6] = 0.5 * da_dna * dt2
        Q = np.diag(np.r_[np.full(3, noise.gyro_noise**2 / dt), np.full(3, noise.accel_noise**2 / dt)])
        cov = A @ cov @ A.T + B @ Q @ B.T

        J_rg_next = E.T @ J_rg - Jr * dt
        da_dbg = -0.5 * (S0 @ J_rg + S1 @ J_rg_next)
        J_pa = J_pa + J_va * dt + 0.5 * da_dna * dt2
        J_pg = J_pg + J_vg * dt + 0.5 * da_dbg * dt2
        J_va = J_va + da_dna * dt
        J_vg = J_vg + da_dbg * dt
        J_rg = J_rg_next

        p = p + v * dt + 0.5 * a_mid * dt2
        v = v + a_mid * dt
        R = R1

    cov = 0.5 * (cov + cov.T)
    return PreintegratedImu(
        delta_R=R,
        delta_v=v,
        delta_p=p,
        covariance=cov,
        J_rg=J_rg,
        J_va=J_va,
        J_vg=J_vg,
        J_pa=J_pa,
        J_pg=J_pg,
        dt_total=(t[-1] - t[0]) * 1e-9,
        ba0=ba0.copy(),
        bg0=bg0.copy(),
        noise=noise,
    )


def gravity_vector(magnitude=9.81):
    return np.array([0.0, 0.0, -float(magnitude)])


def inertial_residual_raw(R_i, p_i, v_i, ba_i, bg_i, R_j, p_j, v_j, ba_j, bg_j, pre, gravity, jacobians=False):
    """Unwhitened 15-vector and optional 15x15 Jacobians w.r.t. both states."""
    dt = pre.dt_total
    dbg = bg_i - pre.bg0
    phi_g = pre.J_rg @ dbg
    dR, dv, dp = pre.corrected(ba_i, bg_i)
    E = dR.T @ R_i.T @ R_j
    r_R = so3_log(E)
    dv_world = v_j - v_i - gravity * dt
    dp_world = p_j - p_i - v_i * dt - 0.5 * gravity * dt * dt
    r_v = R_i.T @ dv_world - dv
    r_p = R_i.T @ dp_world - dp
    r = np.concatenate([r_R, r_v, r_p, ba_i - ba_j, bg_i - bg_j])
    if not jacobians:
        return r

    Jinv = right_jacobian_inv(r_R)
    Ji = np.zeros((15, 15))
    Jj = np.zeros((15, 15))
    I3 = np.eye(3)
    # rotation block
    Ji[0:3, TH] = -Jinv @ R_j.T @ R_i
    Ji[0:3, BG] = -Jinv @ E.T @ right_jacobian(phi_g) @ pre.J_rg
    Jj[0:3, TH] = Jinv
    # velocity block
    Ji[3:6, TH] = skew(R_i.T @ dv_world)
    Ji[3:6, VEL] = -R_i.T
    Ji[3:6, BA] = -pre.J_va
    Ji[3:6, BG] = -pre.J_vg
    Jj[3:6, VEL] = R_i.T
    # position block
    Ji[6:9, TH] = skew(R_i.T @ dp_world)
    Ji[6:9, POS] = -R_i.T
    Ji[6:9, VEL] = -R_i.T * dt
    Ji[6:9, BA] = -pre.J_pa
    Ji[6:9, BG] = -pre.J_pg
    Jj[6:9, POS] = R_i.T
    # bias random walk
    Ji[9:12, BA] = I3
    Jj[9:12, BA] = -I3
    Ji[12:15, BG] = I3
    Jj[12:15, BG] = -I3
    return r, Ji, Jj


def inertial_residual(Xi: KeyframeState, Xj: KeyframeState, pre: PreintegratedImu, gravity, jacobians=False):
    """Preintegration residual between consecutive keyframes (unwhitened).

    Zero when the states obey the preintegrated kinematics with the bias of
    ``Xi`` and a constant bias across the pair.
    """
    gravity = np.asarray(gravity, dtype=float)
    return inertial_residual_raw(
        Xi.R, Xi.p, Xi.v, Xi.ba, Xi.bg, Xj.R, Xj.p, Xj.v, Xj.ba, Xj.bg, pre, gravity, jacobians=jacobians
    )


@dataclass(frozen=True)
class BiasPrior:
    ba: np.ndarray = None
    bg: np.ndarray = None
    sigma_ba: float = 0.1
    sigma_bg: float = 0.01

    def mean(self):
        ba = np.zeros(3) if self.ba is None else np.asarray(self.ba, dtype=float)
        bg = np.zeros(3) if self.bg is None else np.asarray(self.bg, dtype=float)
        return ba, bg

    def sqrt_information(self):
        return np.diag(np.r_[np.full(3, 1.0 / self.sigma_ba), np.full(3, 1.0 / self.sigma_bg)])


def bias_prior_residual(X0: KeyframeState, prior_ba=None, prior_bg=None):
    """``[ba - prior_ba; bg - prior_bg]``; whitening happens in the solver."""
    prior_ba = np.zeros(3) if prior_ba is None else np.asarray(prior_ba, dtype=float)
    prior_bg = np.zeros(3) if prior_bg is None else np.asarray(prior_bg, dtype=float)
    return np.concatenate([X0.ba - prior_ba, X0.bg - prior_bg])
