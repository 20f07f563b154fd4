"""Mono-depth constraints: log inverse-depth residual, scale/shift prior,
edge-aware weights and the temporal-consistency outlier filter.

A depth map holds relative inverse depth ``d``; metric inverse depth is
``a * d + b`` with ``a = eps + softplus(s)`` per keyframe.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from .errors import OutOfBounds
from .geometry import Pose
from .state import (
    Feature,
    KeyframeState,
    ScaleShift,
    anchor_point,
    point_in_camera_batch,
    scale_derivative,
    scale_from_free,
)

LOG_CLAMP = 1e-6
SCALE_PRIOR_SIGMA = 0.3
SHIFT_PRIOR_SIGMA = 0.2


@dataclass(eq=False)
class DepthMap:
    """Dense relative inverse depth, row-major ``(height, width)`` float32."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ValueError("depth map must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("depth map contains non-finite values")

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def height(self):
        return self.values.shape[0]

    def nearest(self, pixel):
        col = int(math.floor(float(pixel[0]) + 0.5))
        row = int(math.floor(float(pixel[1]) + 0.5))
        if not (0 <= col < self.width and 0 <= row < self.height):
            raise OutOfBounds(f"pixel {tuple(pixel)} outside {self.width}x{self.height} map")
        return row, col

    def sample(self, pixel):
        row, col = self.nearest(pixel)
        return float(self.values[row, col])


def write_pfm(path, depth: DepthMap):
    """Little-endian single-channel PFM (rows stored bottom to top)."""
    values = np.asarray(depth.values, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{values.shape[1]} {values.shape[0]}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(values[::-1]).tobytes())


def read_pfm(path) -> DepthMap:
    data = Path(path).read_bytes()
    header = []
    pos = 0
    while len(header) < 3:
        end = data.index(b"\n", pos)
        line = data[pos:end].strip()
        pos = end + 1
        if line:
            header.append(line.decode("ascii"))
    if header[0] != "Pf":
        raise ValueError(f"{path}: only single-channel PFM is supported")
    width, height = (int(x) for x in header[1].split())
    scale = float(header[2])
    dtype = "<f4" if scale < 0 else ">f4"
    values = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return DepthMap(values[::-1].astype(np.float32))


@dataclass(frozen=True)
class DepthMeasurement:
    feature: int  # index into the feature list
    keyframe: int
    d: float
    lam: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.lam <= 1.0:
            raise ValueError("lambda must lie in (0, 1]")


# --- residuals -------------------------------------------------------------


def depth_residual_batch(d, s, b, uvw, same, R_j, p_j, R_k, p_k, R_c, p_c, jacobians=False):
    """``log((a d + b) * Omega)`` for a batch of (feature, keyframe) pairs.

    The argument is clamped below at 1e-6; clamped rows are reported in the
    ``saturated`` mask and get zero Jacobian. Rows whose Omega <= 1e-9 are
    invalid (zero residual).
    """
    d = np.asarray(d, dtype=float)
    n = len(d)
    a = scale_from_free(np.asarray(s, dtype=float))
    a = np.atleast_1d(a)
    affine = a * d + b
    X = np.empty((n, 3))
    jac = None
    if jacobians:
        jac = {k: np.zeros((n, 3, 3)) for k in ("theta_j", "p_j", "theta_k", "p_k", "feature")}
    other = ~same
    if np.any(same):
        if jacobians:
            X[same], jac["feature"][same] = anchor_point(uvw[same], jacobians=True)
        else:
            X[same] = anchor_point(uvw[same])
    if np.any(other):
        out = point_in_camera_batch(
            uvw[other], R_j[other], p_j[other], R_k[other], p_k[other], R_c, p_c, jacobians=jacobians
        )
        if jacobians:
            X[other] = out[0]
            for key, value in out[1].items():
                jac[key][other] = value
        else:
            X[other] = out
    omega = X[:, 2]
    valid = omega > 1e-9
    arg = affine * np.where(valid, omega, 1.0)
    saturated = valid & (arg < LOG_CLAMP)
    r = np.log(np.maximum(arg, LOG_CLAMP))
    r[~valid] = 0.0
    if not jacobians:
        return r, valid, saturated
    live = valid & ~saturated
    safe_aff = np.where(live, affine, 1.0)
    safe_om = np.where(live, omega, 1.0)
    J_sb = np.zeros((n, 1, 2))
    J_sb[:, 0, 0] = np.where(live, d * np.atleast_1d(scale_derivative(s)) / safe_aff, 0.0)
    J_sb[:, 0, 1] = np.where(live, 1.0 / safe_aff, 0.0)
    dr_dX = np.zeros((n, 1, 3))
    dr_dX[:, 0, 2] = np.where(live, 1.0 / safe_om, 0.0)
    out = {key: dr_dX @ value for key, value in jac.items()}
    out["scale_shift"] = J_sb
    return r, valid, saturated, out


def depth_residual(
    m: DepthMeasurement,
    S_k: ScaleShift,
    f: Feature,
    anchor: KeyframeState,
    target: KeyframeState,
    extrinsics: Pose,
    jacobians=False,
):
    """Scalar log-ratio residual; returns ``(value, saturated)`` (plus Jacobians)."""
    same = anchor == target
    out = depth_residual_batch(
        np.array([m.d]),
        np.array([S_k.s]),
        np.array([S_k.b]),
        f.uvw[None],
        np.array([same]),
        anchor.R[None],
        anchor.p[None],
        target.R[None],
        target.p[None],
        extrinsics.R,
        extrinsics.translation,
        jacobians=jacobians,
    )
    r, valid, saturated = out[0], out[1], out[2]
    if not valid[0]:
        raise OutOfBounds(f"feature {f.feature_id} has non-positive depth in keyframe {m.keyframe}")
    if not jacobians:
        return float(r[0]), bool(saturated[0])
    return float(r[0]), bool(saturated[0]), {k: v[0] for k, v in out[3].items()}


def scale_shift_prior_residual(S_k: ScaleShift, whiten=False, sigmas=(SCALE_PRIOR_SIGMA, SHIFT_PRIOR_SIGMA)):
    r = np.array([1.0 - S_k.a, -S_k.b])
    if whiten:
        r = r / np.asarray(sigmas, dtype=float)
    return r


# --- edge-aware weighting ----------------------------------------------------

BILATERAL_RADIUS = 2
BILATERAL_SIGMA_SPACE = 2.0
BILATERAL_SIGMA_RANGE = 0.1
DEFAULT_ALPHA = 0.5


def normalize_unit(values):
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0.0:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def _spatial_kernel(radius, sigma):
    off = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma)), dy, dx


def bilateral_filter(values, radius=BILATERAL_RADIUS, sigma_space=BILATERAL_SIGMA_SPACE, sigma_range=BILATERAL_SIGMA_RANGE):
    """Full-map bilateral filter with replicated borders."""
    values = np.asarray(values, dtype=float)
    spatial, dy, dx = _spatial_kernel(radius, sigma_space)
    padded = np.pad(values, radius, mode="edge")
    H, W = values.shape
    num = np.zeros_like(values)
    den = np.zeros_like(values)
    for ws, oy, ox in zip(spatial.ravel(), dy.ravel(), dx.ravel()):
        shifted = padded[radius + oy : radius + oy + H, radius + ox : radius + ox + W]
        wgt = ws * np.exp(-((shifted - values) ** 2) / (2.0 * sigma_range**2))
        num += wgt * shifted
        den += wgt
    return num / den


def laplacian(values):
    """4-neighbour Laplacian with replicated borders."""
    p = np.pad(np.asarray(values, dtype=float), 1, mode="edge")
    return p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1]


def _filtered_at(values, rows, cols):
    """Bilateral output at selected pixels (same result as the full-map filter)."""
    H, W = values.shape
    spatial, dy, dx = _spatial_kernel(BILATERAL_RADIUS, BILATERAL_SIGMA_SPACE)
    rr = np.clip(rows[:, None] + dy.ravel()[None], 0, H - 1)
    cc = np.clip(cols[:, None] + dx.ravel()[None], 0, W - 1)
    win = values[rr, cc]
    center = values[rows, cols][:, None]
    wgt = spatial.ravel()[None] * np.exp(-((win - center) ** 2) / (2.0 * BILATERAL_SIGMA_RANGE**2))
    return np.sum(wgt * win, axis=1) / np.sum(wgt, axis=1)


def filtered_laplacian_at(values_unit, rows, cols):
    """|Laplacian of the bilateral-filtered map| at the given pixels."""
    H, W = values_unit.shape
    rows = np.asarray(rows, dtype=int)
    cols = np.asarray(cols, dtype=int)
    center = _filtered_at(values_unit, rows, cols)
    total = -4.0 * center
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        total = total + _filtered_at(values_unit, np.clip(rows + dr, 0, H - 1), np.clip(cols + dc, 0, W - 1))
    return np.abs(total)


def edge_weight_from_laplacians(lap_image, lap_depth, alpha=DEFAULT_ALPHA):
    lap_image = 0.0 if lap_image is None else lap_image
    return np.exp(-(alpha * np.abs(lap_image) + np.abs(lap_depth)))


class EdgeWeighter:
    """Caches the normalized maps of one keyframe so many pixels can be queried."""

    def __init__(self, depth: DepthMap, image: Optional[np.ndarray] = None, alpha=DEFAULT_ALPHA):
        self.depth_unit = normalize_unit(depth.values)
        self.image_unit = None if image is None else normalize_unit(image)
        if self.image_unit is not None and self.image_unit.shape != self.depth_unit.shape:
            raise ValueError("image and depth map dimensions differ")
        self.alpha = alpha
        self.depth = depth

    def __call__(self, pixels):
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        idx = np.array([self.depth.nearest(px) for px in pixels]).reshape(-1, 2)
        rows, cols = idx[:, 0], idx[:, 1]
        lap_d = filtered_laplacian_at(self.depth_unit, rows, cols)
        lap_i = None if self.image_unit is None else filtered_laplacian_at(self.image_unit, rows, cols)
        return edge_weight_from_laplacians(lap_i, lap_d, self.alpha)


def edge_weight(image, depth: DepthMap, pixel, alpha=DEFAULT_ALPHA):
    """``exp(-(alpha |lap(Phi(I))| + |lap(Phi(D))|))`` at the nearest pixel.

    Maps are min-max normalized to [0, 1] before filtering so the weight is
    invariant to the unknown affine of the depth map. ``image=None`` drops
    the intensity term.
    """
    return float(EdgeWeighter(depth, image, alpha)([pixel])[0])


# --- temporal-consistency outlier rejection --------------------------------


def nearest_rank_percentile(values, percent):
    ordered = sorted(values)
    if not ordered:
        raise ValueError("percentile of an empty set")
    rank = max(1, math.ceil(percent / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass(frozen=True)
class RejectionResult:
    inliers: frozenset  # {(feature, keyframe)}
    branch: int  # 0: no statistics, 1: reject all, 2: accept all, 3: drop least consistent
    sigmas: dict
    cut: Optional[float] = None

    @property
    def rejected_features(self):
        if self.cut is None:
            return frozenset()
        return frozenset(i for i, s in self.sigmas.items() if s >= self.cut)


def feature_sigmas(residual_table: Mapping):
    per_feature = {}
    for (i, k), r in residual_table.items():
        per_feature.setdefault(i, []).append(float(r))
    sigmas = {}
    for i, rs in per_feature.items():
        if len(rs) >= 2:
            mean = sum(rs) / len(rs)
            sigmas[i] = math.sqrt(sum((x - mean) ** 2 for x in rs) / (len(rs) - 1))
    return sigmas


def reject_outliers(residual_table: Mapping, sigma_min=0.05, sigma_max=0.4) -> RejectionResult:
    """Temporal-consistency filter over ``{(feature, keyframe): residual}``.

    Residuals are expected at the depth-less solution with ``a=1, b=0``.
    Features with a single residual carry no spread and are always kept
    unless everything is rejected.
    """
    everything = frozenset(residual_table)
    sigmas = feature_sigmas(residual_table)
    if not sigmas:
        return RejectionResult(everything, 0, sigmas)
    values = list(sigmas.values())
    if nearest_rank_percentile(values, 25) > sigma_max:
        return RejectionResult(frozenset(), 1, sigmas)
    cut = nearest_rank_percentile(values, 85)
    if cut < sigma_min:
        return RejectionResult(everything, 2, sigmas)
    keep = frozenset(key for key in everything if key[0] not in sigmas or sigmas[key[0]] < cut)
    return RejectionResult(keep, 3, sigmas, cut)
