"""Finite-difference oracles shared by the residual and acceptance tests."""
import functools

import numpy as np

from monovi.bundle import Estimate, ProblemSettings, ScaleShiftPriorFamily
from monovi.closedform import features_from_tracks
from monovi.geometry import PinholeCamera, so3_exp
from monovi.imu import BiasPrior, ImuData, NoiseModel, gravity_vector, inertial_residual_raw, preintegrate
from monovi.monodepth import depth_residual_batch
from monovi.sim import Scenario, generate_sequence
from monovi.solver import ParameterGroup
from monovi.state import free_from_scale
from monovi.vision import reprojection_batch

H = 1e-6
CAMERA = PinholeCamera(460.0, 455.0, 320.0, 240.0, 640, 480)


def relative_error(J, J_fd):
    scale = max(float(np.max(np.abs(J_fd))), float(np.max(np.abs(J))))
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(J - J_fd))) / scale


def central_difference(f, n, h=H):
    """Columns ``(f(+h e_i) - f(-h e_i)) / 2h``; ``f`` takes a tangent step."""
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        cols.append((np.atleast_1d(f(e)) - np.atleast_1d(f(-e))) / (2 * h))
    return np.stack(cols, axis=-1)


def random_rotation(rng, scale=1.0):
    return so3_exp(rng.normal(size=3) * scale)


def random_imu_segment(rng, n=None, dt_ns=5_000_000):
    n = int(rng.integers(5, 40)) if n is None else n
    ts = 10**9 + np.arange(n, dtype=np.int64) * dt_ns
    gyro = rng.normal(size=3) * 0.5 + 0.1 * rng.normal(size=(n, 3))
    accel = np.array([0, 0, 9.81]) + rng.normal(size=3) + 0.3 * rng.normal(size=(n, 3))
    return ImuData(ts, gyro, accel)


# --- inertial ------------------------------------------------------------------


def inertial_case(rng):
    pre = preintegrate(random_imu_segment(rng), rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01, NoiseModel())
    state = lambda: [random_rotation(rng), rng.normal(size=3), rng.normal(size=3), rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01]
    return state(), state(), pre, np.array([0.0, 0.0, -9.81])


def _retract_state(x, d):
    return [x[0] @ so3_exp(d[0:3]), x[1] + d[3:6], x[2] + d[6:9], x[3] + d[9:12], x[4] + d[12:15]]


def inertial_jacobian_errors(rng):
    xi, xj, pre, g = inertial_case(rng)
    _, Ji, Jj = inertial_residual_raw(*xi, *xj, pre, g, jacobians=True)
    fd_i = central_difference(lambda d: inertial_residual_raw(*_retract_state(xi, d), *xj, pre, g), 15)
    fd_j = central_difference(lambda d: inertial_residual_raw(*xi, *_retract_state(xj, d), pre, g), 15)
    return relative_error(Ji, fd_i), relative_error(Jj, fd_j)


# --- reprojection and depth ----------------------------------------------------

KEYS = ("theta_j", "p_j", "theta_k", "p_k", "feature")


def observation_case(rng, same=False):
    """Anchor/target poses with a feature in front of both cameras."""
    Rc, pc = random_rotation(rng, 0.05), rng.normal(size=3) * 0.05
    Rj, pj = random_rotation(rng, 0.05), rng.normal(size=3) * 0.1
    if same:
        Rk, pk = Rj, pj
    else:
        Rk, pk = Rj @ random_rotation(rng, 0.1), pj + rng.normal(size=3) * 0.2
    uvw = np.array([*rng.uniform(-0.4, 0.4, 2), rng.uniform(0.1, 0.5)])
    return dict(uvw=uvw, R_j=Rj, p_j=pj, R_k=Rk, p_k=pk, R_c=Rc, p_c=pc)


def _perturbed(case, key, d):
    c = dict(case)
    if key == "theta_j":
        c["R_j"] = case["R_j"] @ so3_exp(d)
    elif key == "theta_k":
        c["R_k"] = case["R_k"] @ so3_exp(d)
    elif key == "p_j":
        c["p_j"] = case["p_j"] + d
    elif key == "p_k":
        c["p_k"] = case["p_k"] + d
    else:
        c["uvw"] = case["uvw"] + d
    return c


def _reproject(case, obs, same):
    r, valid, _ = reprojection_batch(
        CAMERA, case["uvw"][None], obs[None], np.array([same]),
        case["R_j"][None], case["p_j"][None], case["R_k"][None], case["p_k"][None], case["R_c"], case["p_c"],
    )
    assert valid[0]
    return r[0]


def reprojection_jacobian_errors(rng, same=False):
    case = observation_case(rng, same)
    obs = rng.uniform([0, 0], [640, 480])
    _, valid, _, J = reprojection_batch(
        CAMERA, case["uvw"][None], obs[None], np.array([same]),
        case["R_j"][None], case["p_j"][None], case["R_k"][None], case["p_k"][None], case["R_c"], case["p_c"],
        jacobians=True,
    )
    assert valid[0]
    errors = {}
    for key in KEYS:
        fd = central_difference(lambda d, key=key: _reproject(_perturbed(case, key, d), obs, same), 3)
        if same and key != "feature":
            assert np.all(J[key][0] == 0) and np.allclose(fd, 0)
            continue
        errors[key] = relative_error(J[key][0], fd)
    return errors


def _depth(case, d, sb, same):
    r, valid, sat = depth_residual_batch(
        np.array([d]), np.array([sb[0]]), np.array([sb[1]]), case["uvw"][None], np.array([same]),
        case["R_j"][None], case["p_j"][None], case["R_k"][None], case["p_k"][None], case["R_c"], case["p_c"],
    )
    assert valid[0] and not sat[0]
    return r


def depth_jacobian_errors(rng, same=False):
    case = observation_case(rng, same)
    sb = np.array([free_from_scale(rng.uniform(0.5, 2.0)), rng.uniform(-0.05, 0.05)])
    d = rng.uniform(0.15, 0.6)
    _, valid, sat, J = depth_residual_batch(
        np.array([d]), sb[:1], sb[1:], case["uvw"][None], np.array([same]),
        case["R_j"][None], case["p_j"][None], case["R_k"][None], case["p_k"][None], case["R_c"], case["p_c"],
        jacobians=True,
    )
    assert valid[0] and not sat[0]
    errors = {}
    for key in KEYS:
        fd = central_difference(lambda dd, key=key: _depth(_perturbed(case, key, dd), d, sb, same), 3)
        if same and key != "feature":
            assert np.all(J[key][0] == 0) and np.allclose(fd, 0)
            continue
        errors[key] = relative_error(J[key][0], fd)
    fd = central_difference(lambda dd: _depth(case, d, sb + dd, same), 2)
    errors["scale_shift"] = relative_error(J["scale_shift"][0], fd)
    return errors


def scale_shift_prior_jacobian_error(rng):
    fam = ScaleShiftPriorFamily()
    sb = np.array([[rng.uniform(-4, 4), rng.uniform(-0.5, 0.5)]])

    def residual(d):
        return fam.evaluate({"scale_shift": ParameterGroup("scale_shift", sb + d)}, False).residuals[0]

    J = fam.evaluate({"scale_shift": ParameterGroup("scale_shift", sb)}, True).jacobians[0][2][0]
    return relative_error(J, central_difference(residual, 2))


# --- outlier rejection -----------------------------------------------------------


def table_from_sigmas(sigmas, n_obs=4):
    """Residual table whose per-feature sample std equals ``sigmas`` exactly (up to rounding)."""
    base = np.array([-1.5, -0.5, 0.5, 1.5])[:n_obs]
    base = base / np.std(base, ddof=1)
    return {(i, k): float(s * base[k]) for i, s in enumerate(sigmas) for k in range(n_obs)}


def brute_force(table, sigma_min, sigma_max):
    """Independent oracle: sort-and-index percentiles, explicit std loops."""
    per = {}
    for (i, k), r in table.items():
        per.setdefault(i, []).append(r)
    sig = {}
    for i, rs in per.items():
        if len(rs) >= 2:
            m = sum(rs) / len(rs)
            sig[i] = (sum((x - m) ** 2 for x in rs) / (len(rs) - 1)) ** 0.5
    if not sig:
        return set(table), 0
    vals = sorted(sig.values())

    def pct(p):
        k = 0
        while (k + 1) * 100 < p * len(vals):
            k += 1
        return vals[k]

    if pct(25) > sigma_max:
        return set(), 1
    if pct(85) < sigma_min:
        return set(table), 2
    cut = pct(85)
    return {key for key in table if key[0] not in sig or sig[key[0]] < cut}, 3


# --- ground-truth problems -------------------------------------------------------


@functools.lru_cache(maxsize=None)
def cached_sequence(**kwargs):
    return generate_sequence(Scenario(**kwargs))


def truth_estimate(seq, start=0, count=5):
    """Window, exact stage-1 estimate and preintegrated segments."""
    win, gt = seq.window(start, count), seq.truth(start, count)
    feats = [f.with_uvw(gt.feature(f.feature_id, f.anchor_kf).uvw) for f in features_from_tracks(win)]
    preints = [preintegrate(seg, noise=win.noise) for seg in win.imu_segments]
    return win, gt, Estimate(list(gt.states), feats, []), preints


def settings_for(win, **kw):
    return ProblemSettings(gravity_vector(win.gravity_magnitude), win.camera, win.extrinsics, BiasPrior(), **kw)
