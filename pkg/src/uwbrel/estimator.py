"""Robot 0's clock-synchronisation and relative-pose EKF.

One filter step follows this order:

1. robot 0 folds its own IMU sample into its outgoing RMI;
2. every neighbour pose is pushed back by robot 0's increment (becoming an
   intermediate state), and neighbours whose RMI arrived are closed;
3. clocks are advanced with the exact second-order model;
4. pseudomeasurements (and optional height fixes) are fused;
5. if robot 0 transmitted during this step its outgoing RMI is reset.

The error state layout is documented in :mod:`uwbrel.state`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.stats import chi2

from .clocks import ClockNoiseModel, clock_transition, joint_clock_noise
from .lie import ExtendedPose, adjoint_de23, adjoint_se23, exp_se23, normalize_rotation
from .motion import ImuNoiseModel, ImuSample, build_increment, increment_jacobian
from .preint import Rmi, WindowMismatchError, close_intermediate, rmi_update_with
from .ranging import (
    DEFAULT_DELAYS,
    DEFAULT_HALF_BASELINE,
    PseudoMeasurement,
    measurement_jacobian,
    predict_pseudomeasurements,
)
from .state import (
    NavState,
    TransceiverId,
    clock_row,
    clock_rows_order,
    clock_state_indices,
    is_valid_pose,
    pose_index,
    state_dim,
)

log = logging.getLogger(__name__)

RENORMALIZE_EVERY = 1000


@dataclass
class EstimatorConfig:
    imu_noise: ImuNoiseModel = field(default_factory=ImuNoiseModel)
    clock_noise: ClockNoiseModel = field(default_factory=ClockNoiseModel)
    timestamp_std: float = 0.33  # [ns]
    delays: tuple = DEFAULT_DELAYS
    half_baseline: float = DEFAULT_HALF_BASELINE
    inflation: float = 1.0  # multiplies both Q_u and R
    nis_alpha: float | None = 0.01  # None disables the gate
    track_own_rmi: bool = True
    max_iterations: int = 1  # 1 = plain EKF update
    iteration_tol: float = 1e-9


@dataclass(frozen=True)
class HeightMeasurement:
    """Height of a neighbour relative to robot 0 along ``direction``.

    ``direction`` is the world vertical resolved in robot 0's body frame
    (known to robot 0 from its own attitude); the model is
    ``y = direction . r_0^{i0}``.
    """

    value: float
    std: float = 0.05
    direction: tuple = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.std > 0:
            raise ValueError("height std must be positive")


@dataclass
class CorrectionResult:
    accepted: bool
    nis: float
    dim: int
    reason: str = ""


def nis_gate(innovation, S, alpha: float = 0.01):
    """Chi-square test on the normalised innovation; returns (accept, nis)."""
    nu = np.atleast_1d(np.asarray(innovation, float))
    S = np.atleast_2d(S)
    nis = float(nu @ np.linalg.solve(S, nu))
    return nis <= chi2.ppf(1.0 - alpha, nu.size), nis


class Estimator:
    """On-manifold EKF of robot 0 over neighbours' relative poses and clocks."""

    def __init__(self, nav: NavState, dt: float, config: EstimatorConfig | None = None):
        self.nav = nav
        self.dt = float(dt)
        self.cfg = config or EstimatorConfig()
        n = nav.n
        self._dim = state_dim(n)
        self._clock_idx = clock_state_indices(n)
        self._A = clock_transition(self.dt)
        self._Qc = joint_clock_noise(self.dt, self.cfg.clock_noise, 2 * n + 1)
        self._Qu = self.cfg.imu_noise.covariance() * self.cfg.inflation
        self._thresholds = {}
        self._updates = [0] * n
        self.own_rmi = Rmi.empty(nav.step)
        self.trace: list = []
        self.diagnostics: list = []

    # ------------------------------------------------------------------
    def _event(self, *item):
        self.trace.append((self.nav.step,) + item)

    def _threshold(self, m: int) -> float:
        if m not in self._thresholds:
            self._thresholds[m] = float(chi2.ppf(1.0 - self.cfg.nis_alpha, m))
        return self._thresholds[m]

    # ------------------------------------------------------------------
    def predict(self, u0, arrived_rmis=None, U0=None, L0=None) -> None:
        """Advance the state from step k to k+1 with robot 0's IMU sample.

        ``arrived_rmis`` maps neighbour index to the :class:`Rmi` received in
        this step.  ``U0``/``L0`` may be passed in when already computed.
        """
        nav = self.nav
        arrived_rmis = arrived_rmis or {}
        if U0 is None:
            U0 = build_increment(u0)
        if L0 is None:
            L0 = increment_jacobian(u0)
        if abs(U0.dt - self.dt) > 1e-12:
            raise ValueError("IMU sample period does not match the filter step")
        k_next = nav.step + 1
        LQL = L0 @ self._Qu @ L0.T

        if self.cfg.track_own_rmi:
            self.own_rmi = rmi_update_with(self.own_rmi, U0, LQL)
            self._event("own_rmi_update")

        U0inv = U0.inverse()
        Ad0 = adjoint_de23(U0inv)
        N = self._dim
        F = np.eye(N)
        F[np.ix_(self._clock_idx, self._clock_idx)] = np.kron(np.eye(2 * nav.n + 1), self._A)
        G = np.zeros((N, 6))
        extra = []
        for i in range(1, nav.n + 1):
            s = pose_index(i)
            F[s : s + 9, s : s + 9] = Ad0
            G[s : s + 9] = -L0
            Tc = U0inv @ nav.poses[i - 1]
            rmi = arrived_rmis.get(i)
            if rmi is not None:
                if rmi.window != (nav.last_valid[i - 1], k_next):
                    raise WindowMismatchError(
                        f"RMI of neighbour {i} spans {rmi.window}, expected "
                        f"({nav.last_valid[i - 1]}, {k_next})"
                    )
                T = close_intermediate(Tc, rmi)
                self._updates[i - 1] += 1
                if self._updates[i - 1] % RENORMALIZE_EVERY == 0:
                    T = ExtendedPose(normalize_rotation(T.C), T.v, T.r)
                nav.poses[i - 1] = T
                nav.last_valid[i - 1] = k_next
                AdT = adjoint_se23(T)
                extra.append((s, AdT @ rmi.covariance @ AdT.T))
                self._event("close", i)
            else:
                nav.poses[i - 1] = Tc
        P = F @ nav.P @ F.T + G @ self._Qu @ G.T
        P[np.ix_(self._clock_idx, self._clock_idx)] += self._Qc
        for s, Q in extra:
            P[s : s + 9, s : s + 9] += Q
        nav.P = 0.5 * (P + P.T)
        nav.clocks = nav.clocks @ self._A.T
        nav.step = k_next
        self._event("propagate")

    # ------------------------------------------------------------------
    def _apply_correction(self, model, y, R, label) -> CorrectionResult:
        """Fuse ``y`` with covariance ``R``; ``model(nav)`` returns ``(h, H)``.

        With ``max_iterations > 1`` the update is iterated (Gauss-Newton on
        the manifold): the model is relinearised at the updated estimate
        until the step stops changing.  The NIS gate always uses the first
        linearisation.
        """
        nav = self.nav
        P = nav.P
        h, H = model(nav)
        innovation = y - h
        m = innovation.size
        S = H @ P @ H.T + R
        try:
            cf = cho_factor(S)
        except LinAlgError:
            self.diagnostics.append((nav.step, label, "singular innovation covariance"))
            log.warning("step %d: %s skipped, singular innovation covariance", nav.step, label)
            return CorrectionResult(False, float("nan"), m, "singular")
        nis = float(innovation @ cho_solve(cf, innovation))
        if self.cfg.nis_alpha is not None and nis > self._threshold(m):
            self._event("reject", label)
            return CorrectionResult(False, nis, m, "nis")
        K = cho_solve(cf, H @ P).T
        dx = K @ innovation
        for _ in range(self.cfg.max_iterations - 1):
            trial = self._retracted(nav, dx)
            h, H = model(trial)
            S = H @ P @ H.T + R
            K = cho_solve(cho_factor(S), H @ P).T
            new = K @ (y - h + H @ dx)
            done = np.max(np.abs(new - dx)) < self.cfg.iteration_tol
            dx = new
            if done:
                break
        self._apply_retraction(nav, dx)
        IKH = np.eye(self._dim) - K @ H
        P = IKH @ P @ IKH.T + K @ R @ K.T
        nav.P = 0.5 * (P + P.T)
        self._event("correct", label)
        return CorrectionResult(True, nis, m)

    def _retracted(self, nav: NavState, dx) -> NavState:
        out = NavState(list(nav.poses), nav.clocks.copy(), nav.P, nav.step, list(nav.last_valid))
        self._apply_retraction(out, dx)
        return out

    def _apply_retraction(self, nav: NavState, dx) -> None:
        nav.clocks = nav.clocks + dx[self._clock_idx].reshape(-1, 2)
        for i in range(1, nav.n + 1):
            s = pose_index(i)
            nav.poses[i - 1] = exp_se23(dx[s : s + 9]) @ nav.poses[i - 1]

    def _retract(self, dx) -> None:
        self._apply_retraction(self.nav, dx)

    def correct(self, pm: PseudoMeasurement) -> CorrectionResult:
        nav = self.nav
        for robot in (pm.initiator.robot, pm.target.robot):
            if robot != 0 and not is_valid_pose(nav.poses[robot - 1]):
                raise ValueError(f"neighbour {robot} is still an intermediate state")
        hb = self.cfg.half_baseline

        def model(state):
            return predict_pseudomeasurements(state, pm, hb), measurement_jacobian(state, pm, hb)

        R = pm.covariance * self.cfg.inflation
        label = f"{pm.initiator}->{pm.target}:{pm.dim}"
        return self._apply_correction(model, pm.values, R, label)

    def correct_height(self, meas: HeightMeasurement, robot: int) -> CorrectionResult:
        if not is_valid_pose(self.nav.poses[robot - 1]):
            raise ValueError(f"neighbour {robot} is still an intermediate state")
        n_dir = np.asarray(meas.direction, float)
        s = pose_index(robot)

        def model(state):
            T = state.poses[robot - 1]
            H = np.zeros((1, self._dim))
            H[0, s : s + 3] = -n_dir @ _skew(T.r)
            H[0, s + 6 : s + 9] = n_dir
            return np.array([n_dir @ T.r]), H

        R = np.array([[meas.std**2 * self.cfg.inflation]])
        return self._apply_correction(model, np.array([meas.value]), R, f"height{robot}")

    # ------------------------------------------------------------------
    def step(
        self,
        u0: ImuSample,
        arrived_rmis=None,
        measurements=(),
        robot0_active: bool = False,
        heights=(),
        U0=None,
        L0=None,
    ):
        """Run one full filter step; returns the correction results."""
        self.predict(u0, arrived_rmis, U0, L0)
        results = [self.correct(pm) for pm in measurements]
        results += [self.correct_height(h, r) for r, h in heights]
        if robot0_active:
            self.reset_own_rmi()
        return results

    def reset_own_rmi(self) -> Rmi:
        """Hand out the accumulated own RMI and start a new window."""
        out = self.own_rmi
        self.own_rmi = Rmi.empty(self.nav.step)
        self._event("own_rmi_reset")
        return out


def _skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


# ----------------------------------------------------------------------------
# clock initialisation
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class ClockObservation:
    """Offset and skew read off one pre-flight transaction."""

    time: float  # [s]
    initiator: TransceiverId
    target: TransceiverId
    y_tau: float  # tau_initiator - tau_target [ns]
    y_gamma: float  # gamma_initiator - gamma_target [ppb]

    @staticmethod
    def from_pseudomeasurement(pm: PseudoMeasurement) -> "ClockObservation":
        return ClockObservation(
            pm.epoch, pm.initiator, pm.target, float(pm.values[1]), float(pm.y_gamma)
        )


def initialize_clocks(
    observations,
    n: int,
    t_ref: float = 0.0,
    offset_floor: float = 1.0,
    skew_floor: float = 100.0,
    default_offset_std: float = 1e6,
    default_skew_std: float = 1e5,
    q_gamma: float = 640.0,
):
    """Estimate relative clocks of all transceivers with respect to f0.

    Pre-flight transactions pair f0 or s0 with transceivers of other robots.
    For every pair a line is fitted to the offsets against time and
    evaluated at ``t_ref``; ``q_gamma`` [ppb^2/Hz] widens the reported
    uncertainty for skew drift over the pre-flight window.  s0 (which never ranges with f0 directly) is obtained by
    chaining through every transceiver heard by both; transceivers heard only
    by s0 are chained through the s0 estimate.  Returns ``(means, stds)`` as
    (2n+1, 2) arrays in clock-row order.
    """
    order = clock_rows_order(n)
    by_ref = {0: {t: [] for t in order}, 1: {t: [] for t in order}}
    for ob in observations:
        for ref, sign, other in ((ob.target, 1.0, ob.initiator), (ob.initiator, -1.0, ob.target)):
            # "other minus ref" equals sign * y for both offset and skew
            if ref.robot == 0 and other.robot != 0:
                by_ref[ref.slot][other].append((ob.time, sign * ob.y_tau, sign * ob.y_gamma))

    def fit(rows):
        # offsets are precise while single-shot skews are not, so the skew is
        # taken from a straight-line fit of the offsets against time
        t = np.array([r[0] for r in rows]) - t_ref
        tau = np.array([r[1] for r in rows])
        m = len(rows)
        if m < 3 or np.ptp(t) <= 0:
            g = float(np.mean([r[2] for r in rows]))
            off = float(np.mean(tau + g * (-t)))
            return np.array([off, g]), np.array([default_offset_std, default_skew_std])
        A = np.column_stack([np.ones(m), t])  # ppb * s = ns
        coef, *_ = np.linalg.lstsq(A, tau, rcond=None)
        resid = tau - A @ coef
        s2 = resid @ resid / (m - 2)
        cov = s2 * np.linalg.inv(A.T @ A)
        # random walk of the skew over the pre-flight window
        span = float(np.ptp(t))
        # (a line fitted to an integrated random walk leaves roughly a sixth
        # of its end-point variance)
        extra = np.array([q_gamma * span**3 / 18.0, q_gamma * span])
        std = np.sqrt(np.diag(cov) + extra)
        return coef, np.maximum(std, [offset_floor, skew_floor])

    from_f0 = {t: fit(r) for t, r in by_ref[0].items() if r}
    from_s0 = {t: fit(r) for t, r in by_ref[1].items() if r}

    means = np.zeros((2 * n + 1, 2))
    stds = np.tile([default_offset_std, default_skew_std], (2 * n + 1, 1))
    common = [t for t in from_f0 if t in from_s0]
    s0 = None
    if common:
        diffs = np.array([from_f0[t][0] - from_s0[t][0] for t in common])
        var = np.array([from_f0[t][1] ** 2 + from_s0[t][1] ** 2 for t in common])
        s0_mean = diffs.mean(axis=0)
        s0_std = np.maximum(np.sqrt(var.mean(axis=0) / len(common)), [offset_floor, skew_floor])
        s0 = (s0_mean, s0_std)
        means[0], stds[0] = s0
    for tid in order[1:]:
        row = clock_row(tid)
        if tid in from_f0:
            means[row], stds[row] = from_f0[tid]
        elif tid in from_s0 and s0 is not None:
            means[row] = from_s0[tid][0] + s0[0]
            stds[row] = np.hypot(from_s0[tid][1], s0[1])
    return means, stds
