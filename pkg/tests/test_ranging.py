import dataclasses

import numpy as np
import pytest

from uwbrel.lie import ExtendedPose, exp_se23, so3_exp
from uwbrel.ranging import (
    NS_PER_M,
    SPEED_OF_LIGHT,
    CoincidentTransceiversError,
    MalformedTransactionError,
    Transaction,
    distance_jacobian,
    enumerate_measurements,
    form_pseudomeasurements,
    lever_arm,
    measurement_counts,
    measurement_covariance,
    measurement_jacobian,
    predict_pseudomeasurements,
    read_transaction_log,
    synthesize_timestamps,
    transceiver_distance,
    write_transaction_log,
)
from uwbrel.state import F0, S0, NavState, TransceiverId, clock_row, state_dim

F1, S1, F2, S2 = TransceiverId(1, 0), TransceiverId(1, 1), TransceiverId(2, 0), TransceiverId(2, 1)
ZERO_CLOCKS = {t: (0.0, 0.0) for t in (F0, S0, F1, S1, F2, S2)}


def line_positions(d=3.0):
    return {F0: [0, 0, 0], S0: [0, 1, 0], F1: [d, 0, 0], S1: [d, 1, 0], F2: [0, 0, 2], S2: [0, 0, 4]}


def test_distance_axis_example():
    I = ExtendedPose.identity()
    Ta = ExtendedPose(np.eye(3), np.zeros(3), np.array([1.0, 0, 0]))
    Tb = ExtendedPose(np.eye(3), np.zeros(3), np.array([4.0, 0, 0]))
    assert transceiver_distance(Ta, Tb, np.zeros(3), np.zeros(3)) == 3.0
    assert transceiver_distance(I, I, np.zeros(3), np.zeros(3)) == 0.0


def test_distance_matches_vector_formula():
    rng = np.random.default_rng(0)
    Ta, Tb = exp_se23(rng.normal(size=9)), exp_se23(rng.normal(size=9))
    la, lb = rng.normal(size=3), rng.normal(size=3)
    ref = np.linalg.norm(Tb.C @ lb + Tb.r - Ta.C @ la - Ta.r)
    assert abs(transceiver_distance(Ta, Tb, la, lb) - ref) < 1e-14


def test_distance_jacobian_swap_and_coincident():
    rng = np.random.default_rng(1)
    Ta, Tb = exp_se23(rng.normal(size=9)), exp_se23(rng.normal(size=9))
    la, lb = rng.normal(size=3), rng.normal(size=3)
    ja, jb = distance_jacobian(Ta, Tb, la, lb)
    jb2, ja2 = distance_jacobian(Tb, Ta, lb, la)
    assert np.allclose(ja, ja2) and np.allclose(jb, jb2)
    with pytest.raises(CoincidentTransceiversError):
        distance_jacobian(Ta, Ta, la, la)


def test_timestamps_tof_offset_and_skew():
    d = 3.0
    tx = synthesize_timestamps(line_positions(d), ZERO_CLOCKS, F0, F1, 0.0, 0.0, None)
    assert abs((tx.R1 - tx.T1) - d / SPEED_OF_LIGHT * 1e9) < 1e-9
    assert abs(d / SPEED_OF_LIGHT * 1e9 - 10.0069) < 1e-4
    clocks = dict(ZERO_CLOCKS)
    clocks[F1] = (50.0, 0.0)
    tx = synthesize_timestamps(line_positions(d), clocks, F0, F1, 0.0, 0.0, None)
    assert abs((tx.R1 - tx.T1) - (d * NS_PER_M + 50.0)) < 1e-9
    clocks[F1] = (0.0, 1e4)  # 10 ppm
    tx = synthesize_timestamps(line_positions(d), clocks, F0, F1, 0.0, 0.0, None)
    assert abs((tx.T2 - tx.R1) - (1 + 1e-5) * 300e3) < 1e-7


def test_pseudomeasurements_noiseless_zero_clocks():
    pos = line_positions(3.0)
    tx = synthesize_timestamps(pos, ZERO_CLOCKS, F1, F2, 0.0, 0.0, None)
    pm = form_pseudomeasurements(tx, 0.0)
    d12 = np.linalg.norm(np.subtract(pos[F2], pos[F1]))
    assert abs(pm.values[0] - d12 * NS_PER_M) < 1e-9
    assert abs(pm.values[1]) < 1e-9
    assert abs(pm.values[2] - np.linalg.norm(pos[F1]) * NS_PER_M) < 1e-9
    assert pm.listeners == (F0, S0) and pm.dim == 8


def test_pseudomeasurement_offset_difference():
    clocks = dict(ZERO_CLOCKS)
    clocks[F1] = (40.0, 0.0)
    clocks[S2] = (-25.0, 0.0)
    tx = synthesize_timestamps(line_positions(), clocks, F1, S2, 0.0, 0.0, None)
    assert abs(form_pseudomeasurements(tx, 0.0).values[1] - 65.0) < 1e-9


def test_first_order_residual_with_skews():
    rng = np.random.default_rng(2)
    pos = line_positions(4.0)
    for _ in range(20):
        clocks = {t: (rng.uniform(-100, 100), rng.uniform(-2e4, 2e4)) for t in pos}
        tx = synthesize_timestamps(pos, clocks, F1, S2, 0.0, 0.0, None)
        pm = form_pseudomeasurements(tx, 0.0)
        d = np.linalg.norm(np.subtract(pos[S2], pos[F1]))
        assert abs(pm.values[0] - d * NS_PER_M) < 0.02
        assert abs(pm.values[1] - (clocks[F1][0] - clocks[S2][0])) < 0.02


def test_malformed_reply_gap():
    tx = synthesize_timestamps(line_positions(), ZERO_CLOCKS, F0, F1, 0.0, 0.0, None)
    bad = Transaction(F0, F1, 300e-6, 600e-6, 0.0, tx.T1, tx.R2, tx.R3, tx.R1, tx.T2, tx.T2 + 0.5, tx.passive)
    with pytest.raises(MalformedTransactionError):
        form_pseudomeasurements(bad, 0.33)
    with pytest.raises(ValueError):
        Transaction(F0, S0, 300e-6, 600e-6, 0.0, 0, 0, 0, 0, 0, 0)


def test_covariance_short_reply_limit_entries():
    s = 0.33
    R = measurement_covariance(s, 2, delays=None)
    assert np.isclose(R[0, 0], s * s) and np.isclose(R[0, 2], 0.5 * s * s)
    assert np.isclose(R[0, 1], 0.0)
    assert np.isclose(R[2, 5], s * s) and np.isclose(R[2, 2], 2 * s * s)


def test_covariance_default_delays_psd_and_shapes():
    for m in (0, 1, 2):
        R = measurement_covariance(0.33, m)
        assert R.shape == (2 + 3 * m, 2 + 3 * m)
        assert np.allclose(R, R.T)
        assert np.linalg.eigvalsh(R).min() > 0


def test_covariance_monte_carlo_small():
    # quick version of the 1e6-sample acceptance check
    from uwbrel.selftest import covariance_suite

    assert covariance_suite(n=200_000, tol=0.04).passed


def test_measurement_counts_five_neighbours():
    c = measurement_counts(5)
    assert c.centralized_fold == 16
    # 8n without listening, 2 n_p - 8n new direct and 12 n^2 new passive rows
    assert c.individual_without == 40
    assert c.individual_with == 40 + (2 * 60 - 40) + 12 * 25
    assert c.individual_fold == c.individual_with / c.individual_without == 0.5 + 2 * 5
    assert measurement_counts(0).centralized_fold == 1
    c2 = measurement_counts(2)
    assert c2.pairs == 12 and c2.centralized_fold == 7


def test_measurement_counts_enumeration_oracle():
    assert measurement_counts(0).pairs == enumerate_measurements(0).pairs == 0
    for n in range(1, 11):
        assert measurement_counts(n) == enumerate_measurements(n)


def _nav_from_positions(rng, n=2):
    poses = [exp_se23(np.concatenate([rng.normal(size=6) * 0.3, rng.normal(size=3) * 4])) for _ in range(n)]
    clocks = np.column_stack([rng.normal(0, 50, 2 * n + 1), rng.normal(0, 1e3, 2 * n + 1)])
    return NavState(poses, clocks, np.eye(state_dim(n)))


def test_prediction_matches_noiseless_synthesis():
    rng = np.random.default_rng(3)
    nav = _nav_from_positions(rng)
    tids = [F0, S0, F1, S1, F2, S2]
    positions = {t: nav.pose_of(t.robot).C @ lever_arm(t) + nav.pose_of(t.robot).r for t in tids}
    clocks = {t: tuple(nav.clock_of(t)) for t in tids}
    for a, b in ((F1, S2), (S0, F2), (F2, F0)):
        tx = synthesize_timestamps(positions, clocks, a, b, 0.0, 0.0, None)
        pm = form_pseudomeasurements(tx, 0.0)
        assert np.allclose(predict_pseudomeasurements(nav, pm), pm.values, atol=1e-3)


def test_measurement_jacobian_finite_difference():
    from uwbrel.selftest import _measurement_fd

    rng = np.random.default_rng(4)
    for _ in range(10):
        assert _measurement_fd(rng) < 1e-4


def test_clock_rows_follow_state_layout():
    assert clock_row(F0) is None and clock_row(S0) == 0 and clock_row(S2) == 4


def test_transaction_log_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    txs = [synthesize_timestamps(line_positions(), ZERO_CLOCKS, F1, S2, 0.1 * k, 0.33, rng) for k in range(3)]
    path = tmp_path / "tx.csv"
    write_transaction_log(path, txs)
    back = read_transaction_log(path)
    for a, b in zip(txs, back):
        assert (a.initiator, a.target, a.epoch) == (b.initiator, b.target, b.epoch)
        assert a.T1 == b.T1 and a.R3 == b.R3 and a.passive == b.passive


def test_transaction_log_writes_plain_numbers(tmp_path):
    rng = np.random.default_rng(6)
    tx = synthesize_timestamps(line_positions(), ZERO_CLOCKS, F1, S2, 0.1, 0.33, rng)
    tx = dataclasses.replace(tx, passive={k: tuple(np.float64(x) for x in v) for k, v in tx.passive.items()})
    path = tmp_path / "tx.csv"
    write_transaction_log(path, [tx])
    assert "np." not in path.read_text()
    assert read_transaction_log(path)[0].passive == tx.passive
