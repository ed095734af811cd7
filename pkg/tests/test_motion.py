import numpy as np
import pytest
from scipy.linalg import expm

from uwbrel.lie import ExtendedPose, Increment, exp_se23, log_se23, so3_exp
from uwbrel.motion import (
    GRAVITY,
    ImuNoiseModel,
    ImuSample,
    build_increment,
    check_psd,
    generator,
    increment_jacobian,
    input_factor,
    pose_state_jacobian,
    propagate_pose,
    propagate_pose_covariance,
    relative_pose,
)


def test_zero_input_increment_is_time_machine():
    U = build_increment(ImuSample(np.zeros(3), np.zeros(3), 0.004))
    assert np.allclose(U.C, np.eye(3)) and np.allclose(U.v, 0) and np.allclose(U.r, 0)
    assert U.dt == 0.004


def test_constant_specific_force_increment():
    U = build_increment(ImuSample(np.zeros(3), np.array([0, 0, 9.81]), 0.004))
    assert np.allclose(U.v, [0, 0, 0.03924], atol=1e-15)
    assert np.allclose(U.r, [0, 0, 7.848e-5], atol=1e-15)


def test_increment_matches_expm_of_generator():
    rng = np.random.default_rng(0)
    for _ in range(300):
        u = ImuSample(rng.normal(size=3) * 3, rng.normal(size=3) * 10, float(rng.uniform(1e-3, 0.2)))
        ref = expm(generator(u) * u.dt)
        assert np.max(np.abs(build_increment(u).matrix() - ref)) < 1e-10 * max(1.0, np.abs(ref).max())


def test_nonpositive_dt_rejected():
    with pytest.raises(ValueError):
        ImuSample(np.zeros(3), np.zeros(3), 0.0)


def test_propagate_identity_cases():
    u = ImuSample(np.array([0.1, 0.2, 0.3]), np.array([1.0, 0.0, 9.0]), 0.004)
    U = build_increment(u)
    T = propagate_pose(ExtendedPose.identity(), U, U)
    assert np.allclose(T.matrix(), np.eye(5), atol=1e-14)
    assert np.allclose(pose_state_jacobian(Increment.identity(0.0)), np.eye(9))


def test_static_robots_keep_relative_pose():
    # each robot measures the specific force that cancels gravity
    C0 = so3_exp([0.1, -0.2, 0.3])
    Ci = so3_exp([-0.3, 0.1, 1.0])
    dt = 0.004
    U0 = build_increment(ImuSample(np.zeros(3), -C0.T @ GRAVITY, dt))
    Ui = build_increment(ImuSample(np.zeros(3), -Ci.T @ GRAVITY, dt))
    T = relative_pose(C0, np.zeros(3), np.zeros(3), Ci, np.zeros(3), np.array([3.0, 1.0, -0.5]))
    Tk = T
    for _ in range(250):
        Tk = propagate_pose(Tk, U0, Ui)
    assert np.allclose(Tk.matrix(), T.matrix(), atol=1e-12)


def test_input_factor_zero_rate_structure():
    V = input_factor(ImuSample(np.zeros(3), np.array([1.0, 2.0, 3.0]), 0.01))
    assert np.allclose(V[0:3, 0:3], 0.01 * np.eye(3))
    assert np.allclose(V[3:6, 3:6], 0.01 * np.eye(3))
    assert np.allclose(V[6:9, 3:6], 0.5e-4 * np.eye(3))
    assert np.allclose(V[0:3, 3:6], 0) and np.allclose(V[3:9, 0:3], 0)


def test_pose_jacobian_finite_difference():
    from uwbrel.selftest import jacobian_suite

    r = jacobian_suite(n=20, seed=3)
    assert r.passed, r.detail


def test_increment_jacobian_right_perturbation():
    rng = np.random.default_rng(1)
    u = ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.8], 0.004)
    d = rng.normal(size=6) * 1e-4
    up = ImuSample(u.gyro + d[:3], u.accel + d[3:], u.dt)
    U, Up = build_increment(u), build_increment(up)
    diff = U.inverse() @ Up
    got = log_se23(ExtendedPose(diff.C, diff.v, diff.r))
    pred = increment_jacobian(u) @ d
    assert np.linalg.norm(got - pred) < 1e-3 * np.linalg.norm(pred)


def test_covariance_zero_noise_is_congruence():
    rng = np.random.default_rng(2)
    A = rng.normal(size=(18, 18))
    P = A @ A.T
    u = ImuSample(rng.normal(size=3), rng.normal(size=3), 0.004)
    U0 = build_increment(u)
    out = propagate_pose_covariance(P, U0, increment_jacobian(u), [None, None], ImuNoiseModel(0.0, 0.0))
    F = np.kron(np.eye(2), pose_state_jacobian(U0))
    assert np.allclose(out, F @ P @ F.T, atol=1e-12)
    assert np.allclose(out, out.T, atol=1e-12)


def test_covariance_correlates_neighbours_through_robot0_noise():
    u = ImuSample(np.zeros(3), np.array([0, 0, 9.81]), 0.004)
    out = propagate_pose_covariance(np.zeros((18, 18)), build_increment(u), increment_jacobian(u), [None, None], ImuNoiseModel())
    assert np.abs(out[0:9, 9:18]).max() > 0


def test_check_psd_rejects_bad_matrices():
    with pytest.raises(ValueError):
        check_psd(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        check_psd(np.diag([1.0, -1.0]))
