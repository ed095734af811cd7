import numpy as np
import pytest

from uwbrel.estimator import (
    ClockObservation,
    Estimator,
    EstimatorConfig,
    HeightMeasurement,
    initialize_clocks,
    nis_gate,
)
from uwbrel.lie import ExtendedPose, so3_exp
from uwbrel.motion import GRAVITY, ImuNoiseModel, ImuSample, build_increment
from uwbrel.preint import Rmi, WindowMismatchError, rmi_update
from uwbrel.ranging import form_pseudomeasurements, lever_arm, synthesize_timestamps
from uwbrel.state import F0, S0, NavState, TransceiverId, clock_index, pose_index, state_dim

F1, S1, F2, S2 = TransceiverId(1, 0), TransceiverId(1, 1), TransceiverId(2, 0), TransceiverId(2, 1)
DT = 0.004


def make_nav(clock_std=100.0, pose_std=1e-6):
    poses = [
        ExtendedPose(np.eye(3), np.zeros(3), np.array([3.0, 1.0, 0.5])),
        ExtendedPose(so3_exp([0, 0, 1.0]), np.zeros(3), np.array([-2.0, 4.0, 1.0])),
    ]
    n = 2
    P = np.eye(state_dim(n)) * pose_std**2
    for tid in (S0, F1, S1, F2, S2):
        c = clock_index(tid)
        P[c, c] = clock_std**2
        P[c + 1, c + 1] = (10 * clock_std) ** 2
    return NavState(poses, np.zeros((2 * n + 1, 2)), P)


def positions_of(nav):
    out = {}
    for t in (F0, S0, F1, S1, F2, S2):
        T = nav.pose_of(t.robot)
        out[t] = T.C @ lever_arm(t) + T.r
    return out


def test_nis_gate_examples():
    ok, nis = nis_gate(np.zeros(3), np.eye(3))
    assert ok and nis == 0.0
    ok, nis = nis_gate([4.0], [[1.0]], alpha=0.01)
    assert not ok and nis == 16.0


def test_gate_acceptance_rate_on_consistent_innovations():
    rng = np.random.default_rng(0)
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    L = np.linalg.cholesky(S)
    nu = rng.standard_normal((100_000, 2)) @ L.T
    rate = np.mean([nis_gate(v, S, 0.01)[0] for v in nu[:20_000]])
    assert abs(rate - 0.99) < 0.005


def test_precise_offset_measurement_pulls_clock():
    nav = make_nav()
    truth = {t: (0.0, 0.0) for t in (F0, S0, F1, S1, F2, S2)}
    truth[F1] = (40.0, 0.0)
    truth[S2] = (-25.0, 0.0)
    tx = synthesize_timestamps(positions_of(nav), truth, F1, S2, 0.0, 0.0, None)
    pm = form_pseudomeasurements(tx, 1e-4).direct_only()
    est = Estimator(nav, DT, EstimatorConfig(nis_alpha=None))
    res = est.correct(pm)
    assert res.accepted
    diff = nav.clocks[1, 0] - nav.clocks[4, 0]  # f1 minus s2
    assert abs(diff - 65.0) < 0.01 * 65.0


def test_zero_jacobian_block_is_untouched():
    nav = make_nav(pose_std=0.3)
    before = nav.poses[1]
    est = Estimator(nav, DT, EstimatorConfig(nis_alpha=None))
    est.correct_height(HeightMeasurement(0.8, 0.01), robot=1)
    assert np.array_equal(nav.poses[1].r, before.r)
    assert np.array_equal(nav.poses[1].C, before.C)
    assert abs(nav.poses[0].r[2] - 0.8) < 0.01


def test_height_fixes_converge():
    nav = make_nav(pose_std=0.5)
    est = Estimator(nav, DT, EstimatorConfig(nis_alpha=None))
    for _ in range(20):
        est.correct_height(HeightMeasurement(1.7, 0.001), robot=2)
    assert abs(nav.poses[1].r[2] - 1.7) < 1e-3


def test_singular_innovation_is_skipped():
    nav = make_nav()
    nav.P[:] = 0.0
    est = Estimator(nav, DT, EstimatorConfig(nis_alpha=None))
    res = est.correct_height(HeightMeasurement(0.5, 1e-300), robot=1)
    assert not res.accepted and res.reason == "singular"
    assert est.diagnostics


def test_static_scenario_prediction_keeps_state():
    nav = make_nav()
    truth = [T for T in nav.poses]
    est = Estimator(nav, DT, EstimatorConfig(imu_noise=ImuNoiseModel(0.0, 0.0), nis_alpha=None))
    u0 = ImuSample(np.zeros(3), -GRAVITY, DT)
    ui = [ImuSample(np.zeros(3), -T.C.T @ GRAVITY, DT) for T in truth]
    pending = [Rmi.empty(), Rmi.empty()]
    for k in range(1, 101):
        arrived = {}
        for i in (1, 2):
            pending[i - 1] = rmi_update(pending[i - 1], ui[i - 1], ImuNoiseModel(0.0, 0.0))
            if k % (i + 1) == 0:  # neighbours report at different rates
                arrived[i] = pending[i - 1]
                pending[i - 1] = Rmi.empty(k)
        est.predict(u0, arrived)
    for i in (1, 2):
        if nav.last_valid[i - 1] == 100:
            assert np.allclose(nav.poses[i - 1].matrix(), truth[i - 1].matrix(), atol=1e-10)
    assert nav.last_valid == [100, 99]


def test_wrong_rmi_window_raises():
    nav = make_nav()
    est = Estimator(nav, DT)
    u0 = ImuSample(np.zeros(3), -GRAVITY, DT)
    stale = Rmi(build_increment(u0), np.zeros((9, 9)), (5, 6))
    with pytest.raises(WindowMismatchError):
        est.predict(u0, {1: stale})


def test_own_rmi_tracks_and_resets():
    est = Estimator(make_nav(), DT)
    u0 = ImuSample(np.array([0.1, 0, 0]), -GRAVITY, DT)
    for _ in range(3):
        est.step(u0)
    out = est.step(u0, robot0_active=True)
    assert out == []
    assert est.own_rmi.window == (4, 4)


def _observations(clocks, times, pairs, sigma=0.0, rng=None):
    pos = {F0: [0, 0, 0], S0: [-0.45, 0, 0], F1: [3, 0, 0], S1: [2.6, 0, 0], F2: [0, 4, 0], S2: [0, 3.6, 0]}
    obs = []
    for t in times:
        for a, b in pairs:
            now = {k: (tau + g * t, g) for k, (tau, g) in clocks.items()}
            tx = synthesize_timestamps(pos, now, a, b, t, sigma, rng)
            obs.append(ClockObservation.from_pseudomeasurement(form_pseudomeasurements(tx, max(sigma, 1e-3))))
    return obs


PAIRS = [(own, t) for t in (F1, S1, F2, S2) for own in (F0, S0)]


def test_initialize_clocks_noiseless_recovery():
    clocks = {F0: (0.0, 0.0), S0: (30.0, 2000.0), F1: (-50.0, 1e4), S1: (12.0, -3e3), F2: (80.0, 5e3), S2: (-5.0, 0.0)}
    means, stds = initialize_clocks(_observations(clocks, np.linspace(-1.0, 0.0, 20), PAIRS), 2, t_ref=0.0)
    expect = np.array([clocks[t] for t in (S0, F1, S1, F2, S2)])
    assert np.allclose(means[:, 0], expect[:, 0], atol=0.05)
    assert np.allclose(means[:, 1], expect[:, 1], atol=50.0)
    assert np.all(stds > 0)


def test_initialize_clocks_zero_truth():
    zero = {t: (0.0, 0.0) for t in (F0, S0, F1, S1, F2, S2)}
    means, _ = initialize_clocks(_observations(zero, np.linspace(-1.0, 0.0, 10), PAIRS), 2)
    assert np.allclose(means, 0.0, atol=1e-6)


def test_initialize_clocks_without_data_uses_defaults():
    means, stds = initialize_clocks([], 2)
    assert np.array_equal(means, np.zeros((5, 2)))
    assert np.all(stds[:, 0] == 1e6) and np.all(stds[:, 1] == 1e5)


def test_single_shot_skew_estimate():
    clocks = {t: (0.0, 0.0) for t in (F0, S0, F1, S1, F2, S2)}
    clocks[F1] = (0.0, 1e4)
    ob = _observations(clocks, [0.0], [(F0, F1)])[0]
    # y_gamma is initiator minus target: f0 - f1 = -10 ppm
    assert abs(ob.y_gamma + 1e4) < 1.0
