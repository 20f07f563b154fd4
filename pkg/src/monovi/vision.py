"""Reprojection residual and the Huber loss used by the robust terms."""
from __future__ import annotations

import numpy as np

from .errors import PointBehindCamera
from .geometry import PinholeCamera, Pose
from .state import Feature, KeyframeState, anchor_point, point_in_camera_batch


def huber_cost(squared_norm, delta):
    """rho(s): s inside delta^2, 2 delta sqrt(s) - delta^2 outside."""
    s = np.asarray(squared_norm, dtype=float)
    out = np.where(s <= delta * delta, s, 2.0 * delta * np.sqrt(np.maximum(s, 0.0)) - delta * delta)
    return float(out) if out.ndim == 0 else out


def huber_weight(squared_norm, delta):
    """IRLS weight rho'(s): 1 inside delta^2, delta/sqrt(s) outside."""
    s = np.asarray(squared_norm, dtype=float)
    out = np.where(s <= delta * delta, 1.0, delta / np.sqrt(np.maximum(s, delta * delta)))
    return float(out) if out.ndim == 0 else out


def projection_jacobian(camera: PinholeCamera, X):
    """d pixel / d X_c for a batch of camera-frame points (n, 3) -> (n, 2, 3)."""
    z = X[:, 2]
    J = np.zeros((len(X), 2, 3))
    J[:, 0, 0] = camera.fx / z
    J[:, 0, 2] = -camera.fx * X[:, 0] / (z * z)
    J[:, 1, 1] = camera.fy / z
    J[:, 1, 2] = -camera.fy * X[:, 1] / (z * z)
    return J


def project_batch(camera: PinholeCamera, X):
    return np.stack([camera.fx * X[:, 0] / X[:, 2] + camera.cx, camera.fy * X[:, 1] / X[:, 2] + camera.cy], axis=1)


def reprojection_batch(camera, uvw, obs_px, same, R_j, p_j, R_k, p_k, R_c, p_c, jacobians=False):
    """Vectorized ``project(point_in_camera) - obs``.

    ``same`` marks observations in the anchor keyframe; those depend only on
    the feature parameters. Rows with depth <= 1e-9 are flagged invalid and
    returned with zero residual/Jacobian.
    """
    n = len(uvw)
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
    valid = X[:, 2] > 1e-9
    Xs = np.where(valid[:, None], X, np.array([0.0, 0.0, 1.0]))
    r = project_batch(camera, Xs) - obs_px
    r[~valid] = 0.0
    if not jacobians:
        return r, valid, X
    P = projection_jacobian(camera, Xs)
    P[~valid] = 0.0
    out = {key: P @ value for key, value in jac.items()}
    return r, valid, X, out


def reprojection_residual(
    f: Feature,
    obs_pixel,
    anchor: KeyframeState,
    target: KeyframeState,
    extrinsics: Pose,
    camera: PinholeCamera,
    jacobians=False,
):
    """Pixel residual of feature ``f`` observed in ``target``.

    Pass the same state object (or an equal one) for ``anchor`` and ``target``
    for the anchor observation. Jacobians are returned as a dict keyed by
    ``theta_j, p_j, theta_k, p_k, feature`` (each 2x3).
    """
    same = anchor == target
    R_c = extrinsics.R
    r, valid, X, *rest = reprojection_batch(
        camera,
        f.uvw[None],
        np.asarray(obs_pixel, dtype=float)[None],
        np.array([same]),
        anchor.R[None],
        anchor.p[None],
        target.R[None],
        target.p[None],
        R_c,
        extrinsics.translation,
        jacobians=jacobians,
    )
    if not valid[0]:
        raise PointBehindCamera(f"feature {f.feature_id} is behind the camera (z={X[0, 2]!r})")
    if not jacobians:
        return r[0]
    return r[0], {k: v[0] for k, v in rest[0].items()}
