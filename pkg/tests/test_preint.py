import numpy as np
import pytest

from uwbrel.lie import ExtendedPose, Increment, exp_se23
from uwbrel.motion import ImuNoiseModel, ImuSample, build_increment
from uwbrel.preint import (
    FRAME_BUDGET,
    HEADER,
    PAYLOAD,
    Rmi,
    WindowMismatchError,
    apply_neighbour_rmi,
    close_intermediate,
    deserialize_rmi,
    propagate_without_neighbour,
    rmi_concatenate,
    rmi_update,
    serialize_rmi,
    transmit_rmi,
)
from uwbrel.selftest import _direct_and_rmi


def samples(rng, k, dt=0.004):
    return [ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], dt) for _ in range(k)]


def test_zero_noise_rmi_has_zero_covariance():
    rng = np.random.default_rng(0)
    rmi = Rmi.empty()
    for u in samples(rng, 10):
        rmi = rmi_update(rmi, u, ImuNoiseModel(0.0, 0.0))
    assert np.array_equal(rmi.covariance, np.zeros((9, 9)))
    assert rmi.window == (0, 10) and np.isclose(rmi.increment.dt, 0.04)


def test_rmi_mean_is_product_of_increments():
    rng = np.random.default_rng(1)
    us = samples(rng, 7)
    rmi = Rmi.empty()
    prod = Increment.identity()
    for u in us:
        rmi = rmi_update(rmi, u, ImuNoiseModel())
        prod = prod @ build_increment(u)
    assert np.allclose(rmi.increment.matrix(), prod.matrix(), atol=1e-14)


def test_concatenation_equals_sequential_update():
    rng = np.random.default_rng(2)
    us = samples(rng, 12)
    noise = ImuNoiseModel()
    whole, a, b = Rmi.empty(), Rmi.empty(), Rmi.empty(5)
    for u in us:
        whole = rmi_update(whole, u, noise)
    for u in us[:5]:
        a = rmi_update(a, u, noise)
    for u in us[5:]:
        b = rmi_update(b, u, noise)
    c = rmi_concatenate(a, b)
    assert c.window == whole.window
    assert np.allclose(c.increment.matrix(), whole.increment.matrix(), atol=1e-13)
    assert np.allclose(c.covariance, whole.covariance, rtol=1e-10, atol=1e-20)
    with pytest.raises(WindowMismatchError):
        rmi_concatenate(b, a)


def test_time_machine_debt_accrues():
    U0 = Increment.identity(0.004)
    X = propagate_without_neighbour(ExtendedPose.identity(), U0)
    assert np.isclose(X.dt, -0.004)
    same = propagate_without_neighbour(ExtendedPose.identity(), Increment.identity(0.0))
    assert np.allclose(same.matrix(), np.eye(5))


def test_closing_requires_matching_window():
    X = Increment.identity(-0.008)
    short = Rmi(Increment.identity(0.004), np.zeros((9, 9)), (0, 1))
    with pytest.raises(WindowMismatchError):
        close_intermediate(X, short)
    ok = Rmi(Increment.identity(0.008), np.zeros((9, 9)), (0, 2))
    assert isinstance(close_intermediate(X, ok), ExtendedPose)


def test_preintegrated_path_equals_direct_propagation():
    rng = np.random.default_rng(3)
    for k in (1, 2, 17, 50):
        (Td, Pd), (Tr, Pr) = _direct_and_rmi(rng, k)
        assert np.allclose(Tr.matrix(), Td.matrix(), rtol=1e-9, atol=1e-12)
        assert np.max(np.abs(Pr - Pd)) <= 1e-9 * np.max(np.abs(Pd))


def test_wire_roundtrip_and_size():
    rng = np.random.default_rng(4)
    rmi = Rmi.empty(3)
    for u in samples(rng, 9):
        rmi = rmi_update(rmi, u, ImuNoiseModel())
    data = serialize_rmi(rmi)
    assert PAYLOAD.size == 220
    assert len(data) == HEADER.size + 220 <= FRAME_BUDGET
    back = deserialize_rmi(data)
    assert back.window == rmi.window and back.increment.dt == rmi.increment.dt
    assert serialize_rmi(back) == data
    assert np.allclose(back.increment.matrix(), rmi.increment.matrix(), atol=1e-6)
    assert np.allclose(back.covariance, back.covariance.T)
    w = np.linalg.eigvalsh(back.covariance)
    assert w.min() >= -1e-6 * w.max()


def test_deserialize_rejects_wrong_length():
    with pytest.raises(ValueError):
        deserialize_rmi(b"\x00" * 10)


def test_apply_neighbour_rmi_returns_pose_and_covariance():
    rng = np.random.default_rng(5)
    u = samples(rng, 1)[0]
    rmi = rmi_update(Rmi.empty(), u, ImuNoiseModel())
    T, Q = apply_neighbour_rmi(exp_se23(rng.normal(size=9)), build_increment(u), rmi)
    assert isinstance(T, ExtendedPose) and Q.shape == (9, 9)


def test_deserialize_repairs_indefinite_covariance():
    cov = np.eye(9)
    cov[0, 1] = cov[1, 0] = 1.5  # eigenvalue -0.5
    rmi = Rmi(Increment.identity(0.004), cov, (0, 1))
    from uwbrel.preint import _encode

    back = deserialize_rmi(_encode(rmi))
    w = np.linalg.eigvalsh(back.covariance)
    assert w.min() >= -1e-12 and np.allclose(back.covariance, back.covariance.T)
    assert deserialize_rmi(serialize_rmi(back)).covariance.shape == (9, 9)


def test_transmit_matches_decoded_frame():
    rng = np.random.default_rng(8)
    rmi = Rmi.empty(2)
    for u in samples(rng, 12):
        rmi = rmi_update(rmi, u, ImuNoiseModel())
    sent = transmit_rmi(rmi)
    back = deserialize_rmi(serialize_rmi(rmi))
    assert np.array_equal(sent.covariance, back.covariance)
    assert np.array_equal(sent.increment.matrix(), back.increment.matrix())
