import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from monovi.errors import EmptySegment, NonMonotonicTimestamps
from monovi.geometry import UnitQuaternion, so3_log
from monovi.imu import (
    BiasPrior,
    ImuData,
    ImuSample,
    NoiseModel,
    bias_prior_residual,
    gravity_vector,
    inertial_residual,
    preintegrate,
)
from monovi.state import KeyframeState

from oracles import inertial_jacobian_errors, random_imu_segment

DT_NS = 5_000_000


def constant_segment(gyro, accel, duration, dt_ns=DT_NS):
    n = int(round(duration * 1e9 / dt_ns)) + 1
    ts = np.arange(n, dtype=np.int64) * dt_ns
    return ImuData(ts, np.tile(gyro, (n, 1)), np.tile(accel, (n, 1)))


def test_null_motion():
    pre = preintegrate(constant_segment([0, 0, 0], [0, 0, 0], 0.5))
    assert np.array_equal(pre.delta_R, np.eye(3))
    assert np.array_equal(pre.delta_v, np.zeros(3))
    assert np.array_equal(pre.delta_p, np.zeros(3))
    assert pre.delta_q.as_array().tolist() == [1.0, 0.0, 0.0, 0.0]


def test_constant_acceleration_kinematics():
    pre = preintegrate(constant_segment([0, 0, 0], [1, 0, 0], 0.5))
    assert pre.dt_total == pytest.approx(0.5, abs=1e-15)
    assert np.max(np.abs(pre.delta_v - [0.5, 0, 0])) < 1e-9
    assert np.max(np.abs(pre.delta_p - [0.125, 0, 0])) < 1e-9


def test_sample_list_input_matches_arrays():
    seg = random_imu_segment(np.random.default_rng(0))
    a, b = preintegrate(seg), preintegrate(seg.samples())
    assert np.array_equal(a.delta_p, b.delta_p) and np.array_equal(a.covariance, b.covariance)


def test_errors():
    with pytest.raises(EmptySegment):
        preintegrate([ImuSample(0, (0, 0, 0), (0, 0, 0))])
    with pytest.raises(NonMonotonicTimestamps):
        preintegrate([ImuSample(5, (0, 0, 0), (0, 0, 0)), ImuSample(5, (0, 0, 0), (0, 0, 0))])


def test_bias_jacobians_match_repreintegration():
    rng = np.random.default_rng(1)
    seg = random_imu_segment(rng, n=41)
    ba0, bg0 = rng.normal(size=3) * 0.05, rng.normal(size=3) * 0.01
    pre = preintegrate(seg, ba0, bg0)
    delta = 1e-6
    for axis in range(3):
        e = np.eye(3)[axis] * delta
        pa = preintegrate(seg, ba0 + e, bg0)
        pg = preintegrate(seg, ba0, bg0 + e)
        checks = [
            (pre.J_va[:, axis], (pa.delta_v - pre.delta_v) / delta),
            (pre.J_pa[:, axis], (pa.delta_p - pre.delta_p) / delta),
            (pre.J_vg[:, axis], (pg.delta_v - pre.delta_v) / delta),
            (pre.J_pg[:, axis], (pg.delta_p - pre.delta_p) / delta),
            (pre.J_rg[:, axis], so3_log(pre.delta_R.T @ pg.delta_R) / delta),
        ]
        for analytic, numeric in checks:
            assert np.linalg.norm(analytic - numeric) <= 1e-4 * np.linalg.norm(numeric)


def test_first_order_bias_correction_tracks_repreintegration():
    rng = np.random.default_rng(2)
    seg = random_imu_segment(rng, n=41)
    pre = preintegrate(seg)
    dba, dbg = np.array([0.01, -0.02, 0.015]), np.array([1e-3, -2e-3, 5e-4])
    exact = preintegrate(seg, dba, dbg)
    dR, dv, dp = pre.corrected(dba, dbg)
    assert np.linalg.norm(so3_log(dR.T @ exact.delta_R)) < 1e-6
    assert np.linalg.norm(dv - exact.delta_v) < 1e-6
    assert np.linalg.norm(dp - exact.delta_p) < 1e-6


def truth_pair(seq, k):
    win = seq.window(0, 5)
    gt = seq.truth(0, 5)
    return gt.states[k], gt.states[k + 1], preintegrate(win.imu_segments[k], noise=win.noise), win


def test_residual_zero_at_ground_truth(excited_seq):
    for k in range(4):
        Xi, Xj, pre, win = truth_pair(excited_seq, k)
        r = inertial_residual(Xi, Xj, pre, gravity_vector(win.gravity_magnitude))
        assert np.linalg.norm(r) < 1e-8


def test_position_perturbation_maps_through_rotation(excited_seq):
    Xi, Xj, pre, win = truth_pair(excited_seq, 1)
    g = gravity_vector(win.gravity_magnitude)
    base = inertial_residual(Xi, Xj, pre, g)
    moved = inertial_residual(Xi, Xj.replace(p=Xj.p + [0.1, 0, 0]), pre, g)
    assert np.allclose(moved[6:9] - base[6:9], Xi.R.T @ [0.1, 0, 0], atol=1e-12)
    assert np.array_equal(moved[:6], base[:6])


def test_bias_blocks():
    pre = preintegrate(constant_segment([0, 0, 0], [0, 0, 9.81], 0.1))
    I = UnitQuaternion.identity()
    Xi = KeyframeState(I, np.zeros(3), np.zeros(3), [0.1, 0, 0], [0, 0.01, 0], 0)
    Xj = KeyframeState(I, np.zeros(3), np.zeros(3), [0.05, 0, 0], [0, 0.01, 0], 1)
    r = inertial_residual(Xi, Xj, pre, gravity_vector())
    assert np.allclose(r[9:12], [0.05, 0, 0], atol=1e-15)
    assert np.array_equal(r[12:15], np.zeros(3))
    r = inertial_residual(Xi, Xi.replace(timestamp=1), pre, gravity_vector())
    assert np.array_equal(r[9:15], np.zeros(6))


def test_bias_prior_residual():
    X0 = KeyframeState(UnitQuaternion.identity(), np.zeros(3), np.zeros(3), [0.1, 0, 0], np.zeros(3), 0)
    assert np.array_equal(bias_prior_residual(X0, [0.1, 0, 0], np.zeros(3)), np.zeros(6))
    r = bias_prior_residual(X0)
    assert r[:3].tolist() == [0.1, 0.0, 0.0]
    whitened = BiasPrior(sigma_ba=0.1).sqrt_information() @ r
    assert np.allclose(whitened[:3], [1, 0, 0], atol=1e-15)


def test_inertial_jacobians_match_finite_differences():
    rng = np.random.default_rng(3)
    for _ in range(20):
        ei, ej = inertial_jacobian_errors(rng)
        assert ei < 1e-5 and ej < 1e-5


def test_covariance_psd_and_sqrt_information():
    pre = preintegrate(random_imu_segment(np.random.default_rng(4), n=30))
    assert np.allclose(pre.covariance, pre.covariance.T)
    assert np.min(np.linalg.eigvalsh(pre.covariance)) > -1e-18
    W = pre.sqrt_information()
    assert np.allclose(W.T @ W @ pre.full_covariance(), np.eye(15), atol=1e-6)


def smooth_segment(dt_ns, duration=0.1):
    """One keyframe interval of slowly varying motion."""
    n = int(round(duration * 1e9 / dt_ns)) + 1
    t = np.arange(n) * dt_ns * 1e-9
    gyro = np.stack([0.3 * np.sin(2 * t), 0.2 * np.cos(3 * t), 0.1 + 0 * t], axis=1)
    accel = np.stack([np.sin(t), 0.5 * np.cos(2 * t), 9.81 + 0.2 * t], axis=1)
    return ImuData(np.arange(n, dtype=np.int64) * dt_ns, gyro, accel)


def test_sample_rate_refinement_is_stable():
    coarse = smooth_segment(DT_NS)
    fine_ts = np.arange(0, coarse.timestamps[-1] + 1, DT_NS // 2, dtype=np.int64)
    fine = ImuData(
        fine_ts,
        np.stack([np.interp(fine_ts, coarse.timestamps, coarse.gyro[:, i]) for i in range(3)], axis=1),
        np.stack([np.interp(fine_ts, coarse.timestamps, coarse.accel[:, i]) for i in range(3)], axis=1),
    )
    a, b = preintegrate(coarse), preintegrate(fine)
    assert np.max(np.abs(a.delta_v - b.delta_v)) < 1e-6
    assert np.max(np.abs(a.delta_p - b.delta_p)) < 1e-6
    assert np.max(np.abs(so3_log(a.delta_R.T @ b.delta_R))) < 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(3, 60), st.integers(0, 1000))
def test_covariance_trace_grows_with_duration(n, seed):
    seg = random_imu_segment(np.random.default_rng(seed), n=n + 1)
    short = ImuData(seg.timestamps[:n], seg.gyro[:n], seg.accel[:n])
    assert np.trace(preintegrate(seg).covariance) > np.trace(preintegrate(short).covariance)


@given(st.floats(1e-6, 1.0))
def test_noise_model_rejects_non_positive(x):
    NoiseModel(gyro_noise=x)
    with pytest.raises(ValueError):
        NoiseModel(accel_noise=-x)
