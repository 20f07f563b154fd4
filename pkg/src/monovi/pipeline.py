"""Full initialization: closed form, depth-less VI-BA, depth filtering, full VI-BA."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from .bundle import (
    DepthObservations,
    Estimate,
    ProblemSettings,
    build_problem,
    estimate_from_groups,
    reprojection_rms,
    rescale_estimate,
    visual_count_of,
)
from .closedform import solve_linear_init
from .errors import InitializationFailed, InsufficientData, NumericalFailure, RankDeficient
from .imu import BiasPrior, gravity_vector, preintegrate
from .monodepth import DEFAULT_ALPHA, EdgeWeighter, depth_residual_batch, reject_outliers
from .solver import SolveReport, SolverConfig, hessian_condition, solve
from .state import InitWindow, ScaleShift, free_from_scale

SCHEMA_VERSION = 1
# second stage-2 start only when the depth evidence disagrees with the
# stage-1 scale by more than this (natural log, about 20%)
RESCALE_LOG_THRESHOLD = 0.2


@dataclass(frozen=True)
class PipelineConfig:
    use_depth: bool = True
    sigma_min: float = 0.05
    sigma_max: float = 0.4
    alpha: float = DEFAULT_ALPHA
    sigma_px: float = 1.0
    visual_huber: float = 1.5
    depth_huber: float = 0.2
    bias_sigma_ba: float = 0.1
    bias_sigma_bg: float = 0.01
    max_iter: int = 50
    cost_tol: float = 1e-8
    grad_tol: float = 1e-10
    initial_damping: float = 1e-4
    min_visual_constraints: int = 20
    max_reprojection_rms: float = 2.0
    compute_condition: bool = True
    keyframes: int = 5

    def solver_config(self):
        return SolverConfig(
            max_iter=self.max_iter, cost_tol=self.cost_tol, grad_tol=self.grad_tol, initial_damping=self.initial_damping
        )

    @classmethod
    def from_dict(cls, values: dict):
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(values) - set(known))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        out = {}
        for key, raw in values.items():
            default = getattr(cls, key)
            if isinstance(default, bool):
                if not isinstance(raw, bool):
                    raise ValueError(f"{key} must be a boolean")
                out[key] = raw
            elif isinstance(default, int):
                out[key] = int(raw)
            else:
                out[key] = float(raw)
        return cls(**out)

    def to_dict(self):
        return asdict(self)


@dataclass
class InitReport:
    success: bool
    failure_stage: Optional[str]
    timestamps: list
    estimate: Optional[Estimate] = None
    stage1: Optional[SolveReport] = None
    stage2: Optional[SolveReport] = None
    stage1_estimate: Optional[Estimate] = None
    depth_total: int = 0
    depth_inliers: int = 0
    rejection_branch: Optional[int] = None
    rejected_features: list = field(default_factory=list)
    log_condition_without: Optional[float] = None
    log_condition_with: Optional[float] = None
    reprojection_rms: Optional[float] = None
    closed_form_condition: Optional[float] = None
    closed_form_degenerate: Optional[bool] = None
    rescale_factor: Optional[float] = None
    rescaled_seed: bool = False
    message: str = ""

    @property
    def states(self):
        return None if self.estimate is None else self.estimate.states

    def to_dict(self):
        def num(x):
            if x is None:
                return None
            x = float(x)
            return x if math.isfinite(x) else str(x)

        out = {
            "schema_version": SCHEMA_VERSION,
            "success": self.success,
            "failure_stage": self.failure_stage,
            "message": self.message,
            "timestamps": [int(t) for t in self.timestamps],
            "stage1": None if self.stage1 is None else self.stage1.to_dict(),
            "stage2": None if self.stage2 is None else self.stage2.to_dict(),
            "depth_total": self.depth_total,
            "depth_inliers": self.depth_inliers,
            "depth_rejected": self.depth_total - self.depth_inliers,
            "rejection_branch": self.rejection_branch,
            "rejected_features": [int(i) for i in self.rejected_features],
            "log_condition_without": num(self.log_condition_without),
            "log_condition_with": num(self.log_condition_with),
            "reprojection_rms": num(self.reprojection_rms),
            "closed_form_condition": num(self.closed_form_condition),
            "closed_form_degenerate": self.closed_form_degenerate,
            "rescale_factor": num(self.rescale_factor),
            "rescaled_seed": self.rescaled_seed,
            "states": None,
            "scale_shifts": None,
        }
        if self.estimate is not None:
            out["states"] = [
                {
                    "timestamp": int(s.timestamp),
                    "q": s.q.as_array().tolist(),
                    "p": s.p.tolist(),
                    "v": s.v.tolist(),
                    "ba": s.ba.tolist(),
                    "bg": s.bg.tolist(),
                }
                for s in self.estimate.states
            ]
            out["scale_shifts"] = [{"s": x.s, "b": x.b, "a": x.a} for x in self.estimate.scale_shifts]
        return out


def _condition(problem, enabled):
    if not enabled:
        return None
    try:
        return hessian_condition(problem)
    except RankDeficient:
        return math.inf


def depth_observations(window: InitWindow, est: Estimate, alpha=DEFAULT_ALPHA) -> DepthObservations:
    """Every feature observation with a usable mono-depth sample and its edge weight."""
    fi, kf, an, dd, lam = [], [], [], [], []
    weighters = {}
    for i, f in enumerate(est.features):
        for o in f.observations:
            k = o.keyframe
            dmap = window.depth_maps[k]
            try:
                d = dmap.sample(o.pixel)
            except IndexError:
                continue
            if k not in weighters:
                image = None if window.images is None else window.images[k]
                weighters[k] = EdgeWeighter(dmap, image, alpha)
            fi.append(i)
            kf.append(k)
            an.append(f.anchor_kf)
            dd.append(d)
            lam.append(o.pixel)
    lam_out = np.zeros(len(fi))
    kf_arr = np.asarray(kf, dtype=np.int64)
    px = np.asarray(lam, dtype=float).reshape(-1, 2)
    for k, w in weighters.items():
        sel = kf_arr == k
        lam_out[sel] = w(px[sel])
    return DepthObservations(
        np.asarray(fi, dtype=np.int64), kf_arr, np.asarray(an, dtype=np.int64), np.asarray(dd, dtype=float), lam_out
    )


def prior_depth_residuals(est: Estimate, depth: DepthObservations, extrinsics):
    """Depth residuals with ``a = 1, b = 0``; returns residuals and a usable mask."""
    uvw = np.array([f.uvw for f in est.features]).reshape(-1, 3)[depth.feature]
    R = np.array([s.R for s in est.states])
    P = np.array([s.p for s in est.states])
    s1 = free_from_scale(1.0)
    n = len(depth)
    r, valid, saturated = depth_residual_batch(
        depth.d,
        np.full(n, s1),
        np.zeros(n),
        uvw,
        depth.anchor == depth.keyframe,
        R[depth.anchor],
        P[depth.anchor],
        R[depth.keyframe],
        P[depth.keyframe],
        extrinsics.R,
        extrinsics.translation,
    )
    return r, valid & ~saturated


def run_initialization(window: InitWindow, config: PipelineConfig = PipelineConfig()) -> InitReport:
    """Closed form, stage-1 VI-BA, edge weights and outlier filter, stage-2 VI-BA.

    Stage 2 runs only when ``config.use_depth`` is set and the window carries
    depth maps; otherwise the stage-1 solution is the result.
    """
    report = InitReport(False, None, list(window.timestamps))
    preints = [preintegrate(seg, noise=window.noise) for seg in window.imu_segments]
    try:
        lin = solve_linear_init(window, preints=preints)
    except InsufficientData as exc:
        report.failure_stage = "closed_form"
        report.message = str(exc)
        raise InitializationFailed("closed_form", str(exc), report) from exc
    report.closed_form_condition = lin.condition
    report.closed_form_degenerate = lin.degenerate

    settings = ProblemSettings(
        gravity=gravity_vector(window.gravity_magnitude),
        camera=window.camera,
        extrinsics=window.extrinsics,
        bias_prior=BiasPrior(sigma_ba=config.bias_sigma_ba, sigma_bg=config.bias_sigma_bg),
        sigma_px=config.sigma_px,
        visual_huber=config.visual_huber,
        depth_huber=config.depth_huber,
    )
    seed = Estimate(lin.states, lin.features, [])
    p1 = build_problem(seed, preints, settings)
    n_visual = visual_count_of(p1)
    if n_visual < config.min_visual_constraints:
        report.failure_stage = "stage1"
        report.message = f"{n_visual} valid visual constraints, need {config.min_visual_constraints}"
        raise InitializationFailed("stage1", report.message, report)
    try:
        report.stage1 = solve(p1, config.solver_config())
    except NumericalFailure as exc:
        report.failure_stage = "stage1"
        report.message = str(exc)
        raise InitializationFailed("stage1", str(exc), report) from exc
    if not math.isfinite(report.stage1.final_cost):
        report.failure_stage = "stage1"
        raise InitializationFailed("stage1", "cost diverged", report)
    est1 = estimate_from_groups(p1.groups, seed)
    report.stage1_estimate = est1
    report.log_condition_without = _condition(p1, config.compute_condition)
    final = est1

    if config.use_depth and window.has_depth:
        depth = depth_observations(window, est1, config.alpha)
        r, usable = prior_depth_residuals(est1, depth, window.extrinsics)
        # a*d + b <= 0 at the prior scale/shift cannot enter the log residual
        usable &= depth.d > 0
        depth = depth.subset(usable)
        r = r[usable]
        report.depth_total = len(depth)
        table = {key: float(x) for key, x in zip(depth.keys(), r)}
        rejection = reject_outliers(table, config.sigma_min, config.sigma_max)
        keep = np.array([key in rejection.inliers for key in depth.keys()], dtype=bool)
        inliers = depth.subset(keep)
        report.depth_inliers = len(inliers)
        report.rejection_branch = rejection.branch
        report.rejected_features = sorted(est1.features[i].feature_id for i in rejection.rejected_features)
        priors = [ScaleShift.prior() for _ in window.timestamps]
        seeds = [Estimate(est1.states, est1.features, priors)]
        if len(inliers):
            # second start: stage-1 structure rescaled so the median inlier depth
            # residual vanishes; the weakly observed scale direction is too long
            # a path for damped steps when stage 1 drifted far along it
            factor = math.exp(-float(np.median(r[keep])))
            report.rescale_factor = factor
            if abs(math.log(factor)) > RESCALE_LOG_THRESHOLD:
                seeds.append(rescale_estimate(seeds[0], factor, window.extrinsics, preints, settings.gravity))
        best, failure = None, None
        for idx, seed2 in enumerate(seeds):
            p2 = build_problem(seed2, preints, settings, depth=inliers)
            try:
                rep2 = solve(p2, config.solver_config())
            except NumericalFailure as exc:
                failure = exc
                continue
            if best is None or rep2.final_cost < best[2].final_cost:
                best = (seed2, p2, rep2, idx > 0)
        if best is None:
            report.failure_stage = "stage2"
            report.message = str(failure)
            raise InitializationFailed("stage2", str(failure), report) from failure
        seed2, p2, report.stage2, report.rescaled_seed = best
        final = estimate_from_groups(p2.groups, seed2)
        report.log_condition_with = _condition(p2, config.compute_condition)

    report.estimate = final
    report.reprojection_rms = reprojection_rms(final, window.camera, window.extrinsics)
    if not report.reprojection_rms <= config.max_reprojection_rms:
        report.failure_stage = "validation"
        report.message = f"reprojection RMS {report.reprojection_rms:.3f} px above {config.max_reprojection_rms}"
        return report
    report.success = True
    return report
