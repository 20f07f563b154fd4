import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from monovi.errors import NonPositiveDepth, PointBehindCamera
from monovi.geometry import Pose, UnitQuaternion
from monovi.sim import DEFAULT_CAMERA
from monovi.state import Feature, KeyframeState
from monovi.vision import huber_cost, huber_weight, reprojection_residual

from oracles import reprojection_jacobian_errors


def truth_observations(seq, count=5):
    """(feature at truth, observed pixel, anchor state, target state) for every track observation."""
    win, gt = seq.window(0, count), seq.truth(0, count)
    for tr in win.tracks:
        obs = sorted(tr.observations, key=lambda o: o.keyframe)
        f = gt.feature(tr.feature_id, obs[0].keyframe)
        for o in obs:
            yield f, o.pixel, gt.states[obs[0].keyframe], gt.states[o.keyframe], win


def test_residual_vanishes_at_ground_truth(excited_seq):
    worst = 0.0
    n = 0
    for f, px, anchor, target, win in truth_observations(excited_seq):
        r = reprojection_residual(f, px, anchor, target, win.extrinsics, win.camera)
        worst = max(worst, float(np.max(np.abs(r))))
        n += 1
    assert n > 100
    assert worst < 1e-9


def test_shifted_measurement():
    I = UnitQuaternion.identity()
    X = KeyframeState(I, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), 0)
    f = Feature(0, 0, 0.1, -0.05, 0.25)
    px = DEFAULT_CAMERA.project(np.array([0.1, -0.05, 1.0]) * 4.0)
    assert np.allclose(reprojection_residual(f, px, X, X, Pose(), DEFAULT_CAMERA), 0, atol=1e-12)
    r = reprojection_residual(f, px + [1.0, 0.0], X, X, Pose(), DEFAULT_CAMERA)
    assert np.allclose(r, [-1.0, 0.0], atol=1e-12)


def test_point_behind_target_camera():
    I = UnitQuaternion.identity()
    A = KeyframeState(I, np.zeros(3), np.zeros(3), np.zeros(3), np.zeros(3), 0)
    B = A.replace(p=[0, 0, 5.0], timestamp=1)
    f = Feature(0, 0, 0.0, 0.0, 0.5)
    with pytest.raises(PointBehindCamera):
        reprojection_residual(f, [320, 240], A, B, Pose(), DEFAULT_CAMERA)
    assert issubclass(PointBehindCamera, NonPositiveDepth)


def test_reprojection_jacobians_match_finite_differences():
    rng = np.random.default_rng(0)
    for same in (False, True):
        for _ in range(20):
            for key, err in reprojection_jacobian_errors(rng, same).items():
                assert err < 1e-5, key


def test_huber_weight_values():
    assert huber_weight(0.0, 1.5) == 1.0
    assert huber_weight(1.5**2, 1.5) == 1.0
    assert huber_weight(4 * 1.5**2, 1.5) == 0.5


@given(st.floats(0.05, 5.0))
def test_huber_cost_is_c1_at_threshold(delta):
    s0 = delta * delta
    eps = 1e-7 * s0
    below, above = huber_cost(s0 - eps, delta), huber_cost(s0 + eps, delta)
    assert abs(above - below) < 3 * eps
    # one-sided slopes agree with the IRLS weight rho'(s) = 1 at the boundary
    left = (huber_cost(s0, delta) - huber_cost(s0 - eps, delta)) / eps
    right = (huber_cost(s0 + eps, delta) - huber_cost(s0, delta)) / eps
    assert left == pytest.approx(1.0, rel=1e-6)
    assert right == pytest.approx(1.0, rel=1e-6)


@given(st.floats(0.0, 100.0), st.floats(0.1, 3.0))
def test_irls_weight_is_cost_derivative(s, delta):
    h = 1e-6 * max(s, 1.0)
    lo = max(s - h, 0.0)
    fd = (huber_cost(s + h, delta) - huber_cost(lo, delta)) / (s + h - lo)
    # the kink at delta^2 is C1, so a small stencil still matches
    assert fd == pytest.approx(huber_weight(s, delta), rel=1e-4, abs=1e-6)


@given(st.floats(0.0, 100.0), st.floats(0.1, 3.0))
def test_huber_weight_in_unit_interval(s, delta):
    assert 0.0 < huber_weight(s, delta) <= 1.0
    assert huber_cost(s, delta) <= s + 1e-12
