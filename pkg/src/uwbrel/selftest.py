"""Oracle suites shared by ``uwbrel selftest`` and the test-suite.

Each suite returns a :class:`SuiteResult` with the largest error it saw and
the tolerance it was held to.  The suites compare closed forms against
brute-force references (dense matrix exponentials, Runge-Kutta integration,
sample covariances, step-by-step propagation and finite differences).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm

from .lie import (
    ExtendedPose,
    Increment,
    adjoint_se23,
    exp_se23,
    log_se23,
    so3_exp,
    wedge_se23,
)
from .motion import (
    ImuNoiseModel,
    ImuSample,
    build_increment,
    generator,
    increment_jacobian,
    pose_state_jacobian,
    propagate_pose,
    propagate_pose_covariance,
)
from .preint import Rmi, apply_neighbour_rmi, propagate_without_neighbour, rmi_update
from .ranging import (
    distance_jacobian,
    form_pseudomeasurements,
    lever_arm,
    measurement_covariance,
    measurement_jacobian,
    predict_pseudomeasurements,
    synthesize_timestamps,
    transceiver_distance,
)
from .state import NavState, TransceiverId, clock_state_indices, pose_index, state_dim


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_error: float
    tolerance: float
    seconds: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status}  {self.name:<14} max error {self.max_error:.3e} "
            f"(tolerance {self.tolerance:.1e}, {self.seconds:.2f} s){'  ' + self.detail if self.detail else ''}"
        )


def _rel(a, b) -> float:
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def random_pose(rng, scale=1.0) -> ExtendedPose:
    return ExtendedPose(so3_exp(rng.normal(size=3)), scale * rng.normal(size=3), scale * rng.normal(size=3))


# ----------------------------------------------------------------------------
def lie_suite(n: int = 1000, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    """Closed-form Exp and IMU increments against scipy's dense expm; Log round trips."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for j in range(n):
        xi = rng.normal(size=9) * rng.choice([1e-6, 1e-2, 0.5, 1.5])
        # keep the rotation angle below pi so Log is the principal branch
        phi = np.linalg.norm(xi[:3])
        if phi > 3.0:
            xi[:3] *= 3.0 / phi
        T = exp_se23(xi)
        ref = expm(wedge_se23(xi))
        worst = max(worst, _rel(T.matrix(), ref))
        back = log_se23(T)
        worst = max(worst, float(np.max(np.abs(back - xi)) / max(np.max(np.abs(xi)), 1.0)))
        u = ImuSample(rng.normal(size=3) * 2.0, rng.normal(size=3) * 10.0, float(rng.uniform(1e-3, 0.5)))
        U = build_increment(u)
        worst = max(worst, _rel(U.matrix(), expm(generator(u) * u.dt)))
    return SuiteResult("lie", worst <= tol, worst, tol, time.perf_counter() - t0, f"{n} samples")


def _rk4_relative(T0: np.ndarray, G0: np.ndarray, Gi: np.ndarray, duration: float, h: float) -> np.ndarray:
    def f(T):
        return -G0 @ T + T @ Gi

    T = T0.copy()
    for _ in range(int(round(duration / h))):
        k1 = f(T)
        k2 = f(T + 0.5 * h * k1)
        k3 = f(T + 0.5 * h * k2)
        k4 = f(T + h * k3)
        T = T + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return T


def discretization_suite(seed: int = 0, duration: float = 1.0, h: float = 1e-4, tol: float = 1e-6) -> SuiteResult:
    """Closed-form step of the relative kinematics against RK4 of the continuous model."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    u0 = ImuSample(rng.normal(size=3) * 0.5, rng.normal(size=3) * 2 + [0, 0, 9.81], duration)
    ui = ImuSample(rng.normal(size=3) * 0.5, rng.normal(size=3) * 2 + [0, 0, 9.81], duration)
    T0 = random_pose(rng, 3.0)
    closed = propagate_pose(T0, build_increment(u0), build_increment(ui))
    # the embedded 5x5 form evolves as dT/dt = -G0 T + T Gi
    ref = _rk4_relative(T0.matrix(), generator(u0), generator(ui), duration, h)
    err = float(np.max(np.abs(closed.r - ref[:3, 4])))
    return SuiteResult("discretization", err < tol, err, tol, time.perf_counter() - t0, "position [m]")


# ----------------------------------------------------------------------------
_COV_GEOMETRY = {
    TransceiverId(0, 0): [0.0, 0.0, 0.0],
    TransceiverId(0, 1): [-0.45, 0.0, 0.0],
    TransceiverId(1, 0): [3.0, 1.0, 0.5],
    TransceiverId(1, 1): [2.6, 1.0, 0.5],
    TransceiverId(2, 0): [-2.0, 4.0, 1.0],
    TransceiverId(2, 1): [-2.0, 3.6, 1.0],
}


def _sample_covariance(rng, sigma, n, chunk, listeners):
    clocks = {k: (rng.normal(0, 100), rng.normal(0, 1e4)) for k in _COV_GEOMETRY}
    a, b = TransceiverId(1, 0), TransceiverId(2, 1)
    total = 0
    s1 = s2 = 0.0
    while total < n:
        m = min(chunk, n - total)
        tx = synthesize_timestamps(_COV_GEOMETRY, clocks, a, b, 0.0, sigma, rng, size=m)
        y = form_pseudomeasurements(tx, sigma, listeners=listeners).values  # (dim, m)
        s1 = s1 + y.sum(axis=1)
        s2 = s2 + y @ y.T
        total += m
    mu = s1 / total
    return (s2 - total * np.outer(mu, mu)) / (total - 1)


def covariance_suite(
    n: int = 1_000_000,
    seed: int = 0,
    sigma: float = 0.33,
    tol: float = 0.02,
    covariance_fn=measurement_covariance,
    chunk: int = 250_000,
) -> SuiteResult:
    """Sample covariance of the pseudomeasurements against the analytic R.

    Both roles are checked: two robot-0 listeners (8 rows) and one (5 rows).
    Entries are compared relative to their own magnitude; entries that are
    zero analytically are compared against ``tol * sigma^2``.
    """
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    s2 = sigma * sigma
    err = 0.0
    for listeners in ((TransceiverId(0, 0), TransceiverId(0, 1)), (TransceiverId(0, 0),)):
        S = _sample_covariance(rng, sigma, n, chunk, listeners)
        R = covariance_fn(sigma, len(listeners))
        scale = np.where(np.abs(R) > 1e-12 * s2, np.abs(R), s2)
        err = max(err, float(np.max(np.abs(S - R) / scale)))
    return SuiteResult("covariance", err <= tol, err, tol, time.perf_counter() - t0, f"{n} transactions per role")


def mutated_covariance(sigma, n_listeners=2, delays=None, **kw):
    """Analytic R with the sign of the active-passive block flipped."""
    from .ranging import DEFAULT_DELAYS

    R = measurement_covariance(sigma, n_listeners, DEFAULT_DELAYS if delays is None else delays)
    R[0:2, 2:] *= -1.0
    R[2:, 0:2] *= -1.0
    return R


# ----------------------------------------------------------------------------
def _direct_and_rmi(rng, n_steps: int, dt: float = 0.004):
    """Propagate one neighbour n_steps with per-step inputs, once directly and
    once through an intermediate state closed by the neighbour's RMI."""
    noise = ImuNoiseModel()
    Q = noise.covariance()
    T = random_pose(rng, 5.0)
    A = rng.normal(size=(9, 9)) * 0.1
    P = A @ A.T + 1e-3 * np.eye(9)
    u0s = [ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], dt) for _ in range(n_steps)]
    uis = [ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], dt) for _ in range(n_steps)]

    Td, Pd = T, P
    for u0, ui in zip(u0s, uis):
        U0, Ui = build_increment(u0), build_increment(ui)
        Td = propagate_pose(Td, U0, Ui)
        Bi = adjoint_se23(Td) @ increment_jacobian(ui)
        Pd = propagate_pose_covariance(Pd, U0, increment_jacobian(u0), [Bi], noise, check=False)

    X, Px = T, P
    rmi = Rmi.empty(0)
    for j, (u0, ui) in enumerate(zip(u0s, uis)):
        U0 = build_increment(u0)
        rmi = rmi_update(rmi, ui, noise)
        if j < n_steps - 1:
            X = propagate_without_neighbour(X, U0)
            F = pose_state_jacobian(U0)
            L0 = increment_jacobian(u0)
            Px = F @ Px @ F.T + L0 @ Q @ L0.T
        else:
            F = pose_state_jacobian(U0)
            L0 = increment_jacobian(u0)
            Px = F @ Px @ F.T + L0 @ Q @ L0.T
            X, extra = apply_neighbour_rmi(X, U0, rmi)
            Px = Px + extra
    return (Td, Pd), (X, Px)


def preint_suite(n_windows: int = 100, seed: int = 0, tol: float = 1e-9) -> SuiteResult:
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_windows):
        k = int(rng.integers(1, 51))
        (Td, Pd), (Tr, Pr) = _direct_and_rmi(rng, k)
        worst = max(worst, _rel(Tr.matrix(), Td.matrix()), _rel(Pr, Pd))
    return SuiteResult("preintegration", worst <= tol, worst, tol, time.perf_counter() - t0, f"{n_windows} windows")


# ----------------------------------------------------------------------------
def _fd_left(fun, T, h=1e-6):
    """Central differences of a scalar/vector function under left perturbations."""
    cols = []
    for j in range(9):
        e = np.zeros(9)
        e[j] = h
        cols.append((np.atleast_1d(fun(exp_se23(e) @ T)) - np.atleast_1d(fun(exp_se23(-e) @ T))) / (2 * h))
    return np.column_stack(cols)


def _increment_log(U: Increment) -> np.ndarray:
    return log_se23(ExtendedPose(U.C, U.v, U.r))


def jacobian_suite(n: int = 100, seed: int = 0, tol: float = 1e-4) -> SuiteResult:
    """Finite-difference checks of the distance, process and measurement Jacobians."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst = {"distance": 0.0, "process": 0.0, "input": 0.0, "measurement": 0.0}
    for _ in range(n):
        Ta, Tb = random_pose(rng, 3.0), random_pose(rng, 3.0)
        la, lb = rng.normal(size=3) * 0.3, rng.normal(size=3) * 0.3
        ja, jb = distance_jacobian(Ta, Tb, la, lb)
        fa = _fd_left(lambda T: transceiver_distance(T, Tb, la, lb), Ta)
        fb = _fd_left(lambda T: transceiver_distance(Ta, T, la, lb), Tb)
        worst["distance"] = max(worst["distance"], _rel(ja, fa), _rel(jb, fb))

        dt = 0.004
        u0 = ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], dt)
        ui = ImuSample(rng.normal(size=3), rng.normal(size=3) + [0, 0, 9.81], dt)
        U0, Ui = build_increment(u0), build_increment(ui)
        T = random_pose(rng, 3.0)
        Tn = propagate_pose(T, U0, Ui)
        F = pose_state_jacobian(U0)
        fF = _fd_left(lambda X: log_se23(propagate_pose(X, U0, Ui) @ Tn.inverse()), T)
        worst["process"] = max(worst["process"], _rel(F, fF))

        L = increment_jacobian(ui)
        h = 1e-6
        cols = []
        for j in range(6):
            d = np.zeros(6)
            d[j] = h
            up = build_increment(ImuSample(ui.gyro + d[:3], ui.accel + d[3:], dt))
            um = build_increment(ImuSample(ui.gyro - d[:3], ui.accel - d[3:], dt))
            cols.append((_increment_log(Ui.inverse() @ up) - _increment_log(Ui.inverse() @ um)) / (2 * h))
        worst["input"] = max(worst["input"], _rel(L, np.column_stack(cols)))

        worst["measurement"] = max(worst["measurement"], _measurement_fd(rng))
    err = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return SuiteResult("jacobians", err < tol, err, tol, time.perf_counter() - t0, detail)


def _random_nav(rng, n: int = 2) -> NavState:
    poses = []
    for _ in range(n):
        T = random_pose(rng, 1.0)
        poses.append(ExtendedPose(T.C, T.v, T.r + rng.normal(size=3) * 4.0))
    clocks = np.column_stack([rng.normal(0, 50, 2 * n + 1), rng.normal(0, 5e3, 2 * n + 1)])
    return NavState(poses, clocks, np.eye(state_dim(n)))


def _measurement_fd(rng) -> float:
    n = 2
    nav = _random_nav(rng, n)
    tids = [TransceiverId(r, s) for r in range(n + 1) for s in (0, 1)]
    while True:
        a, b = rng.choice(len(tids), 2, replace=False)
        a, b = tids[a], tids[b]
        if a.robot != b.robot:
            break
    positions = {}
    for t in tids:
        T = nav.pose_of(t.robot)
        positions[t] = T.C @ lever_arm(t) + T.r
    clocks = {t: (float(nav.clock_of(t)[0]), float(nav.clock_of(t)[1])) for t in tids}
    tx = synthesize_timestamps(positions, clocks, a, b, 0.0, 0.33, rng)
    pm = form_pseudomeasurements(tx, 0.33)
    H = measurement_jacobian(nav, pm)
    cidx = clock_state_indices(n)
    h = 1e-6

    def shifted(dx):
        out = NavState(list(nav.poses), nav.clocks + dx[cidx].reshape(-1, 2), nav.P, nav.step)
        for i in range(1, n + 1):
            s = pose_index(i)
            out.poses[i - 1] = exp_se23(dx[s : s + 9]) @ nav.poses[i - 1]
        return predict_pseudomeasurements(out, pm)

    cols = []
    for j in range(H.shape[1]):
        dx = np.zeros(H.shape[1])
        dx[j] = h
        cols.append((shifted(dx) - shifted(-dx)) / (2 * h))
    return _rel(H, np.column_stack(cols))


SUITES = {
    "lie": lie_suite,
    "discretization": discretization_suite,
    "covariance": covariance_suite,
    "preintegration": preint_suite,
    "jacobians": jacobian_suite,
}


def run_all(quick: bool = False, fault: str | None = None):
    """Run every suite; ``quick`` shrinks sample counts, ``fault='d-sign'``
    feeds the covariance suite a deliberately wrong R."""
    results = [lie_suite(200 if quick else 1000), discretization_suite()]
    cov_fn = mutated_covariance if fault == "d-sign" else measurement_covariance
    results.append(covariance_suite(200_000 if quick else 1_000_000, covariance_fn=cov_fn, tol=0.03 if quick else 0.02))
    results.append(preint_suite(20 if quick else 100))
    results.append(jacobian_suite(20 if quick else 100))
    return results
