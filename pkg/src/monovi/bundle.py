"""Residual families and problem assembly for the two VI-BA stages."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .geometry import PinholeCamera, Pose, UnitQuaternion
from .imu import VEL, BiasPrior, inertial_residual_raw
from .monodepth import SCALE_PRIOR_SIGMA, SHIFT_PRIOR_SIGMA, depth_residual_batch
from .solver import FamilyEval, LowerBound, ParameterGroup, Problem, ResidualFamily
from .state import ScaleShift, scale_derivative, scale_from_free
from .vision import reprojection_batch

STATE_GROUPS = ("theta", "p", "v", "ba", "bg")


@dataclass
class Estimate:
    states: list  # KeyframeState
    features: list  # Feature
    scale_shifts: list = field(default_factory=list)  # ScaleShift, empty in stage 1

    def copy(self):
        return Estimate(list(self.states), list(self.features), list(self.scale_shifts))


@dataclass(frozen=True)
class VisualObservations:
    """Flat arrays of every (feature, keyframe) pixel observation."""

    feature: np.ndarray
    keyframe: np.ndarray
    anchor: np.ndarray
    pixel: np.ndarray

    @classmethod
    def from_features(cls, features):
        fi, kf, an, px = [], [], [], []
        for i, f in enumerate(features):
            for o in f.observations:
                fi.append(i)
                kf.append(o.keyframe)
                an.append(f.anchor_kf)
                px.append(o.pixel)
        return cls(
            np.asarray(fi, dtype=np.int64),
            np.asarray(kf, dtype=np.int64),
            np.asarray(an, dtype=np.int64),
            np.asarray(px, dtype=float).reshape(-1, 2),
        )


@dataclass(frozen=True)
class DepthObservations:
    feature: np.ndarray
    keyframe: np.ndarray
    anchor: np.ndarray
    d: np.ndarray
    lam: np.ndarray

    def __len__(self):
        return len(self.feature)

    def subset(self, mask):
        return DepthObservations(*(getattr(self, n)[mask] for n in ("feature", "keyframe", "anchor", "d", "lam")))

    def keys(self):
        return list(zip(self.feature.tolist(), self.keyframe.tolist()))


def _poses(groups, items):
    return groups["theta"].values[items], groups["p"].values[items]


class InertialFamily(ResidualFamily):
    name = "inertial"

    def __init__(self, preints: list, gravity):
        self.preints = preints
        self.gravity = np.asarray(gravity, dtype=float)
        self.sqrt_info = [pre.sqrt_information() for pre in preints]

    def evaluate(self, groups, jacobians):
        n = len(self.preints)
        R, P, V = groups["theta"].values, groups["p"].values, groups["v"].values
        BA, BG = groups["ba"].values, groups["bg"].values
        r = np.zeros((n, 15))
        Ji = np.zeros((n, 15, 15))
        Jj = np.zeros((n, 15, 15))
        for k, (pre, W) in enumerate(zip(self.preints, self.sqrt_info)):
            out = inertial_residual_raw(
                R[k], P[k], V[k], BA[k], BG[k], R[k + 1], P[k + 1], V[k + 1], BA[k + 1], BG[k + 1],
                pre, self.gravity, jacobians=jacobians,
            )
            if jacobians:
                r[k] = W @ out[0]
                Ji[k] = W @ out[1]
                Jj[k] = W @ out[2]
            else:
                r[k] = W @ out
        ev = FamilyEval(r, np.ones(n, dtype=bool))
        if jacobians:
            items_i = np.arange(n)
            for c, gname in enumerate(STATE_GROUPS):
                cols = slice(3 * c, 3 * c + 3)
                ev.jacobians.append((gname, items_i, Ji[:, :, cols]))
                ev.jacobians.append((gname, items_i + 1, Jj[:, :, cols]))
        return ev


class BiasPriorFamily(ResidualFamily):
    name = "bias_prior"

    def __init__(self, prior: BiasPrior):
        self.mean = np.concatenate(prior.mean())
        self.W = prior.sqrt_information()

    def evaluate(self, groups, jacobians):
        x = np.concatenate([groups["ba"].values[0], groups["bg"].values[0]])
        ev = FamilyEval((self.W @ (x - self.mean))[None], np.ones(1, dtype=bool))
        if jacobians:
            ev.jacobians.append(("ba", np.array([0]), self.W[None, :, :3]))
            ev.jacobians.append(("bg", np.array([0]), self.W[None, :, 3:]))
        return ev


class VisualFamily(ResidualFamily):
    name = "visual"
    counts_as_visual = True

    def __init__(self, obs: VisualObservations, camera: PinholeCamera, extrinsics: Pose, sigma_px=1.0, huber_delta=1.5):
        self.obs = obs
        self.camera = camera
        self.R_c = extrinsics.R
        self.p_c = extrinsics.translation
        self.sigma = float(sigma_px)
        self.huber_delta = huber_delta
        self.same = obs.anchor == obs.keyframe

    def evaluate(self, groups, jacobians):
        o = self.obs
        uvw = groups["feature"].values[o.feature]
        R_j, p_j = _poses(groups, o.anchor)
        R_k, p_k = _poses(groups, o.keyframe)
        out = reprojection_batch(
            self.camera, uvw, o.pixel, self.same, R_j, p_j, R_k, p_k, self.R_c, self.p_c, jacobians=jacobians
        )
        ev = FamilyEval(out[0] / self.sigma, out[1])
        if jacobians:
            jac = out[3]
            ev.jacobians += [
                ("theta", o.anchor, jac["theta_j"] / self.sigma),
                ("p", o.anchor, jac["p_j"] / self.sigma),
                ("theta", o.keyframe, jac["theta_k"] / self.sigma),
                ("p", o.keyframe, jac["p_k"] / self.sigma),
                ("feature", o.feature, jac["feature"] / self.sigma),
            ]
        return ev


class DepthFamily(ResidualFamily):
    name = "depth"

    def __init__(self, obs: DepthObservations, extrinsics: Pose, huber_delta=0.2):
        self.obs = obs
        self.R_c = extrinsics.R
        self.p_c = extrinsics.translation
        self.huber_delta = huber_delta
        self.same = obs.anchor == obs.keyframe

    def evaluate(self, groups, jacobians):
        o = self.obs
        uvw = groups["feature"].values[o.feature]
        sb = groups["scale_shift"].values[o.keyframe]
        R_j, p_j = _poses(groups, o.anchor)
        R_k, p_k = _poses(groups, o.keyframe)
        out = depth_residual_batch(
            o.d, sb[:, 0], sb[:, 1], uvw, self.same, R_j, p_j, R_k, p_k, self.R_c, self.p_c, jacobians=jacobians
        )
        ev = FamilyEval(out[0][:, None], out[1], weights=o.lam, saturated=int(np.count_nonzero(out[2])))
        if jacobians:
            jac = out[3]
            ev.jacobians += [
                ("theta", o.anchor, jac["theta_j"]),
                ("p", o.anchor, jac["p_j"]),
                ("theta", o.keyframe, jac["theta_k"]),
                ("p", o.keyframe, jac["p_k"]),
                ("feature", o.feature, jac["feature"]),
                ("scale_shift", o.keyframe, jac["scale_shift"]),
            ]
        return ev


class ScaleShiftPriorFamily(ResidualFamily):
    name = "scale_shift_prior"

    def __init__(self, sigmas=(SCALE_PRIOR_SIGMA, SHIFT_PRIOR_SIGMA)):
        self.sig = np.asarray(sigmas, dtype=float)

    def evaluate(self, groups, jacobians):
        sb = groups["scale_shift"].values
        a = np.atleast_1d(scale_from_free(sb[:, 0]))
        r = np.stack([1.0 - a, -sb[:, 1]], axis=1) / self.sig
        ev = FamilyEval(r, np.ones(len(sb), dtype=bool))
        if jacobians:
            J = np.zeros((len(sb), 2, 2))
            J[:, 0, 0] = -np.atleast_1d(scale_derivative(sb[:, 0])) / self.sig[0]
            J[:, 1, 1] = -1.0 / self.sig[1]
            ev.jacobians.append(("scale_shift", np.arange(len(sb)), J))
        return ev


# --- parameter groups --------------------------------------------------------


def tilt_basis(R0):
    """Right-tangent directions of a left rotation about the global x and y axes."""
    return R0.T[:, :2]


def make_groups(est: Estimate, with_scale_shift=False):
    R = np.array([s.R for s in est.states])
    groups = [
        ParameterGroup("theta", R, "so3", bases={0: tilt_basis(R[0])}),
        ParameterGroup("p", [s.p for s in est.states], fixed=(0,)),
        ParameterGroup("v", [s.v for s in est.states]),
        ParameterGroup("ba", [s.ba for s in est.states]),
        ParameterGroup("bg", [s.bg for s in est.states]),
        ParameterGroup("feature", [f.uvw for f in est.features]),
    ]
    if with_scale_shift:
        groups.append(ParameterGroup("scale_shift", [[x.s, x.b] for x in est.scale_shifts]))
    return groups


MIN_INVERSE_DEPTH = 1e-9
positive_inverse_depth = LowerBound("feature", 2, MIN_INVERSE_DEPTH)


def estimate_from_groups(groups, template: Estimate) -> Estimate:
    R = groups["theta"].values
    states = [
        s.replace(
            q=UnitQuaternion.from_matrix(R[k]),
            p=groups["p"].values[k],
            v=groups["v"].values[k],
            ba=groups["ba"].values[k],
            bg=groups["bg"].values[k],
        )
        for k, s in enumerate(template.states)
    ]
    features = [f.with_uvw(groups["feature"].values[i]) for i, f in enumerate(template.features)]
    scale_shifts = list(template.scale_shifts)
    if "scale_shift" in groups:
        scale_shifts = [ScaleShift(float(x[0]), float(x[1])) for x in groups["scale_shift"].values]
    return Estimate(states, features, scale_shifts)


def _fit_velocities(states, P, V, preints, gravity):
    """Velocities minimizing the whitened inertial residuals, all else fixed.

    The residual is affine in the velocities, so one Gauss-Newton step from
    any start is exact.
    """
    n = len(states)
    rows, rhs = [], []
    for k, pre in enumerate(preints):
        a, b = states[k], states[k + 1]
        r, Ji, Jj = inertial_residual_raw(
            a.R, P[k], V[k], a.ba, a.bg, b.R, P[k + 1], V[k + 1], b.ba, b.bg, pre, gravity, jacobians=True
        )
        W = pre.sqrt_information()
        block = np.zeros((15, 3 * n))
        block[:, 3 * k : 3 * k + 3] = W @ Ji[:, VEL]
        block[:, 3 * k + 3 : 3 * k + 6] = W @ Jj[:, VEL]
        rows.append(block)
        rhs.append(-(W @ r))
    dv = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    return V + dv.reshape(n, 3)


def rescale_estimate(est: Estimate, factor: float, extrinsics: Pose, preints=None, gravity=None) -> Estimate:
    """Scale the metric structure about the first camera centre.

    Camera centres are scaled by ``factor`` and inverse depths divided by
    it, which leaves every reprojection unchanged. Velocities are scaled
    too, or re-derived from the new positions and the preintegrated deltas
    when ``preints`` and ``gravity`` are given.
    """
    pc = extrinsics.translation
    C = np.array([s.p + s.R @ pc for s in est.states])
    C = C[0] + factor * (C - C[0])
    P = np.array([C[k] - s.R @ pc for k, s in enumerate(est.states)])
    V = np.array([factor * s.v for s in est.states])
    if preints:
        V = _fit_velocities(est.states, P, V, preints, np.asarray(gravity, dtype=float))
    states = [s.replace(p=P[k], v=V[k]) for k, s in enumerate(est.states)]
    features = [f.with_uvw((f.u, f.v, f.w / factor)) for f in est.features]
    return Estimate(states, features, list(est.scale_shifts))


@dataclass
class ProblemSettings:
    gravity: np.ndarray
    camera: PinholeCamera
    extrinsics: Pose
    bias_prior: BiasPrior
    sigma_px: float = 1.0
    visual_huber: float = 1.5
    depth_huber: float = 0.2


def build_problem(est: Estimate, preints, settings: ProblemSettings, depth: Optional[DepthObservations] = None):
    """Stage-1 problem when ``depth`` is None, otherwise the full objective.

    Holding groups derived from ``est``; solve then read back with
    :func:`estimate_from_groups`.
    """
    families = [
        InertialFamily(preints, settings.gravity),
        BiasPriorFamily(settings.bias_prior),
        VisualFamily(
            VisualObservations.from_features(est.features),
            settings.camera,
            settings.extrinsics,
            settings.sigma_px,
            settings.visual_huber,
        ),
    ]
    with_depth = depth is not None and len(depth) > 0
    if with_depth:
        families.append(DepthFamily(depth, settings.extrinsics, settings.depth_huber))
        families.append(ScaleShiftPriorFamily())
    return Problem(make_groups(est, with_scale_shift=with_depth), families, validators=[positive_inverse_depth])


def reprojection_rms(est: Estimate, camera: PinholeCamera, extrinsics: Pose):
    obs = VisualObservations.from_features(est.features)
    if len(obs.feature) == 0:
        return float("nan")
    groups = {g.name: g for g in make_groups(est)}
    fam = VisualFamily(obs, camera, extrinsics)
    ev = fam.evaluate(groups, False)
    if not np.any(ev.valid):
        return float("inf")
    r = ev.residuals[ev.valid] * fam.sigma
    return float(np.sqrt(np.mean(np.sum(r**2, axis=1))))


def visual_count_of(problem: Problem):
    """Number of valid visual blocks at the problem's current parameters."""
    total = 0
    for fam in problem.families:
        if fam.counts_as_visual:
            total += int(np.count_nonzero(fam.evaluate(problem.groups, False).valid))
    return total
