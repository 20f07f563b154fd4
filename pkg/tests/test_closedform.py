import math
from dataclasses import replace

import numpy as np
import pytest

from monovi.closedform import (
    features_from_tracks,
    gravity_alignment,
    integrate_rotations,
    linear_system,
    solve_linear_init,
)
from monovi.errors import EmptySegment, InsufficientData
from monovi.geometry import Pose, so3_log
from monovi.imu import ImuData, NoiseModel, preintegrate
from monovi.sim import DEFAULT_CAMERA, DEFAULT_EXTRINSICS
from monovi.state import InitWindow, Observation, Track

from oracles import cached_sequence

DT_NS = 5_000_000


def constant_imu(gyro, accel, t0, t1, dt_ns=DT_NS):
    ts = np.arange(t0, t1 + 1, dt_ns, dtype=np.int64)
    return ImuData(ts, np.tile(gyro, (len(ts), 1)), np.tile(accel, (len(ts), 1)))


def test_zero_gyro_gives_identity():
    segs = [constant_imu([0, 0, 0], [0, 0, 9.81], k * 10**8, (k + 1) * 10**8) for k in range(4)]
    for q in integrate_rotations(segs):
        assert np.array_equal(q.matrix(), np.eye(3))


def test_constant_yaw_rate():
    qs = integrate_rotations([constant_imu([0, 0, 1.0], [0, 0, 9.81], 0, 10**9)])
    assert np.allclose(so3_log(qs[-1].matrix()), [0, 0, 1.0], atol=1e-6)


def test_short_segment_raises():
    with pytest.raises(EmptySegment):
        integrate_rotations([ImuData(np.array([0]), np.zeros((1, 3)), np.zeros((1, 3)))])


def test_rotations_track_simulator():
    # nine keyframes at 10 Hz span 0.8 s
    seq = cached_sequence(kind="excited", duration=1.0, seed=3)
    win, gt = seq.window(0, 9), seq.truth(0, 9)
    R0 = gt.states[0].R
    worst = 0.0
    for q, s in zip(integrate_rotations(win.imu_segments), gt.states):
        worst = max(worst, np.linalg.norm(so3_log(q.matrix().T @ R0.T @ s.R)))
    assert math.degrees(worst) < 0.1


def test_noiseless_excited_window(excited_seq):
    win, gt = excited_seq.window(0, 5), excited_seq.truth(0, 5)
    init = solve_linear_init(win)
    R0 = gt.states[0].R
    assert np.linalg.norm(init.v0 - R0.T @ gt.states[0].v) < 1e-3
    g_true = R0.T @ np.array([0.0, 0.0, -win.gravity_magnitude])
    angle = math.degrees(math.acos(np.clip(init.gravity_kf0 @ g_true / win.gravity_magnitude**2, -1, 1)))
    assert angle < 0.1
    feats = features_from_tracks(win)
    assert len(feats) >= 100
    true_depth = np.array([1.0 / gt.feature(f.feature_id, f.anchor_kf).w for f in feats])
    assert np.max(np.abs(init.depths / true_depth - 1.0)) < 0.01
    assert not init.degenerate


def test_result_is_gravity_aligned(excited_seq):
    win = excited_seq.window(0, 5)
    init = solve_linear_init(win)
    g_world = init.states[0].R @ init.gravity_kf0
    assert np.allclose(g_world, [0, 0, -win.gravity_magnitude], atol=1e-9)
    assert np.linalg.norm(init.gravity_kf0) == pytest.approx(win.gravity_magnitude, abs=1e-12)
    assert all(np.array_equal(s.ba, np.zeros(3)) and np.array_equal(s.bg, np.zeros(3)) for s in init.states)
    assert all(ss.a == pytest.approx(1.0) and ss.b == 0.0 for ss in init.scale_shifts)


def static_window(n_kf=5):
    """Camera frozen in place: every feature sits at the same pixel in every keyframe."""
    ts = [k * 10**8 for k in range(n_kf)]
    segs = [constant_imu([0, 0, 0], [0, 0, 9.81], ts[k], ts[k + 1]) for k in range(n_kf - 1)]
    rng = np.random.default_rng(0)
    tracks = []
    for i in range(20):
        px = tuple(rng.uniform([50, 50], [590, 430]))
        tracks.append(Track(i, tuple(Observation(k, px) for k in range(n_kf))))
    return InitWindow(ts, segs, tracks, DEFAULT_CAMERA, DEFAULT_EXTRINSICS, NoiseModel(), 9.81)


def test_zero_motion_is_degenerate_in_depth():
    init = solve_linear_init(static_window())
    assert np.allclose(init.v0, 0, atol=1e-9)
    assert np.linalg.norm(init.gravity_kf0) == pytest.approx(9.81, abs=1e-12)
    assert init.degenerate


def test_too_few_features():
    win = static_window()
    with pytest.raises(InsufficientData):
        solve_linear_init(replace(win, tracks=win.tracks[:2]))


def scaled_window(seq, factor, count=5):
    """The same window with every translation (trajectory, landmarks, lever arm) multiplied by ``factor``.

    Pixels and gyro are unchanged; the specific force picks up the extra
    world acceleration rotated into the body frame.
    """
    win = seq.window(0, count)
    traj = seq.trajectory
    Rs = traj.rotations()
    segs = []
    for seg in win.imu_segments:
        idx = traj.index_of(seg.timestamps)
        extra = np.einsum("nba,nb->na", Rs[idx], (factor - 1.0) * seq.accel_world[idx])
        segs.append(ImuData(seg.timestamps, seg.gyro, seg.accel + extra))
    ext = Pose(win.extrinsics.rotation, factor * win.extrinsics.translation)
    return replace(win, imu_segments=segs, extrinsics=ext)


def test_scaled_scene_scales_depths(excited_seq):
    base = solve_linear_init(excited_seq.window(0, 5))
    doubled = solve_linear_init(scaled_window(excited_seq, 2.0))
    assert np.max(np.abs(doubled.depths / base.depths - 2.0)) < 2e-3
    assert np.allclose(doubled.v0, 2.0 * base.v0, rtol=0, atol=2e-3 * np.linalg.norm(base.v0))


def test_unconstrained_solution_is_global_least_squares(excited_seq):
    win = excited_seq.window(0, 5)
    preints = [preintegrate(s, noise=win.noise) for s in win.imu_segments]
    feats = features_from_tracks(win)
    A, y = linear_system(win, integrate_rotations(win.imu_segments), preints, feats)
    U, sv, Vt = np.linalg.svd(A, full_matrices=False)
    x_svd = Vt.T @ ((U.T @ y) / sv)
    x = np.linalg.lstsq(A, y, rcond=None)[0]
    assert np.linalg.norm(A @ x - y) <= np.linalg.norm(A @ x_svd - y) * (1 + 1e-9) + 1e-12
    assert np.allclose(x, x_svd, rtol=1e-8, atol=1e-10)


def test_pinned_gravity_resolve_is_least_squares(excited_seq):
    # once |g| is fixed, velocity and depths are the least-squares optimum given g
    win = excited_seq.window(0, 5)
    init = solve_linear_init(win)
    preints = [preintegrate(s, noise=win.noise) for s in win.imu_segments]
    feats = features_from_tracks(win)
    A, y = linear_system(win, integrate_rotations(win.imu_segments), preints, feats)
    keep = np.r_[0:3, 6 : A.shape[1]]
    rhs = y - A[:, 3:6] @ init.gravity_kf0
    U, sv, Vt = np.linalg.svd(A[:, keep], full_matrices=False)
    best = Vt.T @ ((U.T @ rhs) / sv)
    assert init.residual_norm == pytest.approx(np.linalg.norm(A[:, keep] @ best - rhs), rel=1e-9, abs=1e-12)
    assert np.allclose(np.r_[init.v0, init.depths], best, rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("g", [[0, 0, -9.81], [0.3, -0.2, -9.7], [0, 0, 9.81], [1.0, 2.0, 0.5]])
def test_gravity_alignment_maps_to_down(g):
    R = gravity_alignment(g)
    assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)
    assert np.allclose(R @ (np.array(g) / np.linalg.norm(g)), [0, 0, -1], atol=1e-12)
