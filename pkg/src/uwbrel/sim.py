"""Multi-robot world simulator and scenario runner.

A *world* is everything that does not depend on the comparison mode: smooth
trajectories, noiseless and noisy IMU data, absolute transceiver clocks,
pre-flight and in-flight ranging transactions, and packet drops.  A *run*
replays one world through robot 0's estimator under one mode:

``proposed``     every transaction, with robot 0's passive rows (5 or 8)
``centralized``  (tof, tau) of every transaction, no passive rows
``no_passive``   (tof, tau) only of transactions robot 0 takes part in

Sharing one world across modes gives paired trials.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .clocks import ClockNoiseModel, ClockState, simulate_clock
from .estimator import (
    ClockObservation,
    Estimator,
    EstimatorConfig,
    HeightMeasurement,
    initialize_clocks,
)
from .lie import (
    ExtendedPose,
    Increment,
    adjoint_de23_batch,
    adjoint_se23,
    exp_se23,
    left_jacobian_se23_batch,
    left_jacobian_so3,
    left_jacobian_so3_inv,
    log_se23_batch,
    n_matrix,
    skew,
    so3_exp,
    so3_log_batch,
)
from .motion import GRAVITY, ImuNoiseModel, ImuSample
from .preint import Rmi, transmit_rmi
from .ranging import (
    DEFAULT_DELAYS,
    form_pseudomeasurements,
    lever_arm,
    synthesize_timestamps,
    cross_robot_pairs,
)
from .state import (
    F0,
    S0,
    NavState,
    TransceiverId,
    all_transceivers,
    clock_rows_order,
    is_valid_pose,
    clock_index,
    pose_index,
    state_dim,
)

MODES = ("proposed", "centralized", "no_passive")


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    """The filter produced a non-finite or non-positive-definite state."""


@dataclass
class ScenarioConfig:
    """All knobs of one scenario.  Keys of the JSON config file match these names."""

    n_robots: int = 3
    duration: float = 30.0  # [s]
    imu_rate: float = 250.0  # [Hz]
    uwb_rate: float = 125.0  # transactions per second
    accel_std: float = 0.023  # [m/s^2]
    gyro_std: float = 0.0066  # [rad/s]
    timestamp_std: float = 0.33  # [ns]
    clock_q_tau: float = 0.4  # [ns^2/Hz]
    clock_q_gamma: float = 640.0  # [ppb^2/Hz]
    init_offset_std: float = 100.0  # absolute clock offsets at start [ns]
    init_skew_std: float = 1e4  # absolute clock skews at start [ppb]
    mode: str = "proposed"
    seed: int = 0
    delay21: float = DEFAULT_DELAYS[0]  # [s]
    delay31: float = DEFAULT_DELAYS[1]  # [s]
    half_baseline: float = 0.225  # [m]
    drop_prob: float = 0.0
    preflight_rounds: int = 20
    prior_attitude_std: float = 0.1  # [rad]
    prior_velocity_std: float = 0.1  # [m/s]
    prior_position_std: float = 0.3  # [m]
    inflation: float = 1.0
    max_iterations: int = 1
    nis_alpha: float | None = None  # simulated data has no outliers to gate
    height_std: float | None = None  # [m]; None disables height fixes
    max_speed: float = 5.5  # [m/s]
    max_rate: float = 1.0  # [rad/s]
    min_separation: float = 2.0  # closest allowed approach of two robots [m]
    world_yaw: float = 0.0  # [rad]
    world_shift: tuple = (0.0, 0.0, 0.0)  # [m]
    wire_rmis: bool = True

    def validate(self) -> "ScenarioConfig":
        if self.n_robots < 2:
            raise ConfigError("at least two robots are needed")
        if self.duration <= 0 or self.imu_rate <= 0 or self.uwb_rate <= 0:
            raise ConfigError("duration and rates must be positive")
        ratio = self.imu_rate / self.uwb_rate
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ConfigError("IMU rate must be an integer multiple of the UWB rate")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if not 0 < self.delay21 < self.delay31:
            raise ConfigError("delays must satisfy 0 < delay21 < delay31")
        if self.delay31 + 1e-4 > 1.0 / self.uwb_rate:
            raise ConfigError("a transaction must fit in one UWB slot")
        if not 0.0 <= self.drop_prob < 1.0:
            raise ConfigError("drop_prob must be in [0, 1)")
        for name in ("accel_std", "gyro_std", "timestamp_std", "clock_q_tau", "clock_q_gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.inflation <= 0:
            raise ConfigError("inflation must be positive")
        return self

    @property
    def dt(self) -> float:
        return 1.0 / self.imu_rate

    @property
    def steps_per_slot(self) -> int:
        return int(round(self.imu_rate / self.uwb_rate))

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.imu_rate))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["world_shift"] = list(self.world_shift)
        return d

    @staticmethod
    def from_dict(d: dict) -> "ScenarioConfig":
        names = {f.name for f in dataclasses.fields(ScenarioConfig)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "world_shift" in d:
            d["world_shift"] = tuple(d["world_shift"])
        try:
            return ScenarioConfig(**d).validate()
        except TypeError as exc:  # pragma: no cover - defensive
            raise ConfigError(str(exc)) from exc

    @staticmethod
    def load(path) -> "ScenarioConfig":
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return ScenarioConfig.from_dict(data)

    def estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(
            imu_noise=ImuNoiseModel(self.gyro_std, self.accel_std),
            clock_noise=ClockNoiseModel(self.clock_q_tau, self.clock_q_gamma),
            timestamp_std=self.timestamp_std,
            delays=(self.delay21, self.delay31),
            half_baseline=self.half_baseline,
            inflation=self.inflation,
            nis_alpha=self.nis_alpha,
            max_iterations=self.max_iterations,
        )


# ----------------------------------------------------------------------------
# trajectories
# ----------------------------------------------------------------------------
def _rot_z(angle):
    c, s = np.cos(angle), np.sin(angle)
    out = np.zeros(np.shape(angle) + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Analytic trajectory of one robot.

    Position per axis is ``center + sum_m A_m (sin(w_m t + p_m) - sin p_m)``.
    Attitude is ``Rz(yaw(t)) Exp([tilt_x(t), tilt_y(t), 0])`` where yaw and
    the two tilt angles are sums of sinusoids as well.  A common world yaw and
    shift can be applied on top.
    """

    center: np.ndarray  # (3,)
    amp: np.ndarray  # (3, m)
    freq: np.ndarray  # (3, m)
    phase: np.ndarray  # (3, m)
    yaw0: float
    ang_amp: np.ndarray  # (3, m): yaw, tilt x, tilt y
    ang_freq: np.ndarray
    ang_phase: np.ndarray
    world_yaw: float = 0.0
    world_shift: tuple = (0.0, 0.0, 0.0)

    def _wave(self, t, amp, freq, phase, order):
        t = np.asarray(t, dtype=float)[..., None, None]
        arg = freq * t + phase
        if order == 0:
            return (amp * (np.sin(arg) - np.sin(phase))).sum(-1)
        if order == 1:
            return (amp * freq * np.cos(arg)).sum(-1)
        return (-amp * freq**2 * np.sin(arg)).sum(-1)

    def _to_world(self, vec):
        return vec @ _rot_z(self.world_yaw).T

    def position(self, t):
        local = self.center + self._wave(t, self.amp, self.freq, self.phase, 0)
        return self._to_world(local) + np.asarray(self.world_shift)

    def velocity(self, t):
        return self._to_world(self._wave(t, self.amp, self.freq, self.phase, 1))

    def acceleration(self, t):
        return self._to_world(self._wave(t, self.amp, self.freq, self.phase, 2))

    def _angles(self, t, order=0):
        out = self._wave(t, self.ang_amp, self.ang_freq, self.ang_phase, order)
        if order == 0:
            out = out + np.array([self.yaw0, 0.0, 0.0])
        return out

    def attitude(self, t):
        ang = self._angles(t)
        tilt = np.zeros(ang.shape)
        tilt[..., :2] = ang[..., 1:]
        return _rot_z(ang[..., 0] + self.world_yaw) @ so3_exp(tilt.reshape(-1, 3)).reshape(
            ang.shape[:-1] + (3, 3)
        )

    def omega(self, t):
        """Body-frame angular velocity."""
        ang = self._angles(t)
        rate = self._angles(t, 1)
        tilt = np.zeros(ang.shape)
        tilt[..., :2] = ang[..., 1:]
        tilt_rate = np.zeros(ang.shape)
        tilt_rate[..., :2] = rate[..., 1:]
        flat = tilt.reshape(-1, 3)
        E = so3_exp(flat)
        Jr = np.swapaxes(left_jacobian_so3(flat), -1, -2)
        ez = np.array([0.0, 0.0, 1.0])
        w = (np.swapaxes(E, -1, -2) @ ez) * rate[..., 0].reshape(-1, 1) + np.einsum(
            "nij,nj->ni", Jr, tilt_rate.reshape(-1, 3)
        )
        return w.reshape(ang.shape)


def random_trajectory(
    rng,
    index: int,
    n_robots: int,
    duration: float,
    max_speed: float = 5.5,
    max_rate: float = 1.0,
    world_yaw: float = 0.0,
    world_shift=(0.0, 0.0, 0.0),
) -> Trajectory:
    """Draw a smooth random trajectory for robot ``index``.

    Amplitudes and frequencies are chosen so that a 60 s flight covers
    roughly 60-200 m with peaks near ``max_speed``; both speed and angular
    rate are capped by uniform scaling.
    """
    m = 3
    radius = max(5.0, 1.5 * n_robots)
    ang = 2 * math.pi * index / n_robots
    center = np.array([radius * math.cos(ang), radius * math.sin(ang), 2.0 + rng.uniform(-0.3, 0.3)])
    amp = np.vstack(
        [rng.uniform(1.5, 4.5, m), rng.uniform(1.5, 4.5, m), rng.uniform(0.2, 0.8, m)]
    )
    freq = rng.uniform(0.15, 0.5, (3, m))
    phase = rng.uniform(0, 2 * math.pi, (3, m))
    ang_amp = np.vstack([rng.uniform(0.3, 1.0, m), rng.uniform(0.03, 0.12, (2, m))])
    ang_freq = np.vstack([rng.uniform(0.15, 0.5, m), rng.uniform(0.3, 1.2, (2, m))])
    ang_phase = rng.uniform(0, 2 * math.pi, (3, m))
    yaw0 = rng.uniform(-math.pi, math.pi)
    traj = Trajectory(center, amp, freq, phase, yaw0, ang_amp, ang_freq, ang_phase, world_yaw, tuple(world_shift))
    t = np.linspace(0.0, max(duration, 1.0), int(max(duration, 1.0) * 50) + 1)
    speed = np.linalg.norm(traj.velocity(t), axis=-1).max()
    rate = np.linalg.norm(traj.omega(t), axis=-1).max()
    s_pos = min(1.0, 0.98 * max_speed / speed) if speed > 0 else 1.0
    s_ang = min(1.0, 0.98 * max_rate / rate) if rate > 0 else 1.0
    if s_pos < 1.0 or s_ang < 1.0:
        traj = dataclasses.replace(traj, amp=amp * s_pos, ang_amp=ang_amp * s_ang)
    return traj


@dataclass
class RobotTruth:
    """Sampled truth of one robot on the IMU grid (k = 0 .. K)."""

    C: np.ndarray  # (K+1, 3, 3)
    v: np.ndarray  # (K+1, 3)
    r: np.ndarray  # (K+1, 3)
    gyro: np.ndarray  # (K, 3) noiseless
    accel: np.ndarray  # (K, 3) noiseless


def imu_from_truth(C, v, dt):
    """Gyro and specific force that reproduce the sampled attitude and velocity
    exactly when integrated with the closed-form increment."""
    Omega = so3_log_batch(np.swapaxes(C[:-1], -1, -2) @ C[1:])
    gyro = Omega / dt
    dv = v[1:] - v[:-1] - GRAVITY * dt
    body = np.einsum("kji,kj->ki", C[:-1], dv)
    accel = np.einsum("kij,kj->ki", left_jacobian_so3_inv(Omega), body) / dt
    return gyro, accel


def batch_increments(gyro, accel, dt):
    """Closed-form increments for a stack of samples: (C, v, r) arrays."""
    Omega = gyro * dt
    C = so3_exp(Omega)
    v = dt * np.einsum("kij,kj->ki", left_jacobian_so3(Omega), accel)
    r = 0.5 * dt * dt * np.einsum("kij,kj->ki", n_matrix(Omega), accel)
    return C, v, r


def batch_increment_jacobians(gyro, accel, dt):
    """L = J_l(-V u) V for a stack of samples, shape (K, 9, 6)."""
    Omega = gyro * dt
    K = gyro.shape[0]
    V = np.zeros((K, 9, 6))
    V[:, 0:3, 0:3] = dt * np.eye(3)
    V[:, 3:6, 3:6] = dt * np.eye(3)
    V[:, 6:9, 3:6] = 0.5 * dt * dt * (left_jacobian_so3_inv(Omega) @ n_matrix(Omega))
    Vu = np.einsum("kij,kj->ki", V, np.concatenate([gyro, accel], axis=1))
    return left_jacobian_se23_batch(-Vu) @ V


def sample_truth(traj: Trajectory, n_steps: int, dt: float) -> RobotTruth:
    t = np.arange(n_steps + 1) * dt
    C = traj.attitude(t)
    v = traj.velocity(t)
    gyro, accel = imu_from_truth(C, v, dt)
    # positions follow from the same increments so that truth and IMU agree exactly
    _, _, r_inc = batch_increments(gyro, accel, dt)
    dr = v[:-1] * dt + 0.5 * GRAVITY * dt * dt + np.einsum("kij,kj->ki", C[:-1], r_inc)
    r = np.empty_like(v)
    r[0] = traj.position(0.0)
    r[1:] = r[0] + np.cumsum(dr, axis=0)
    return RobotTruth(C, v, r, gyro, accel)


def synthesize_imu(traj: Trajectory, t: float, noise: ImuNoiseModel, rng, dt: float) -> ImuSample:
    """One IMU sample over [t, t + dt] (interval-consistent with the truth)."""
    ts = np.array([t, t + dt])
    gyro, accel = imu_from_truth(traj.attitude(ts), traj.velocity(ts), dt)
    return ImuSample(
        gyro[0] + rng.normal(0.0, noise.gyro_std, 3),
        accel[0] + rng.normal(0.0, noise.accel_std, 3),
        dt,
    )


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------
def build_schedule(n_robots: int):
    """One cycle of (initiator, target) pairs; roles flip on odd cycles."""
    if n_robots < 2:
        raise ValueError("need at least two robots")
    return list(cross_robot_pairs(n_robots))


def scheduled_pair(schedule, slot: int):
    a, b = schedule[slot % len(schedule)]
    return (a, b) if (slot // len(schedule)) % 2 == 0 else (b, a)


# ----------------------------------------------------------------------------
# world
# ----------------------------------------------------------------------------
@dataclass
class World:
    cfg: ScenarioConfig
    trajectories: list
    truth: list  # RobotTruth per robot
    increments: list  # per robot (C, v, r) arrays from noisy IMU
    jacobians: list  # per robot (K, 9, 6)
    noisy_gyro: list
    noisy_accel: list
    clocks: dict  # tid -> (K_pre + K + 1, 2) absolute clocks
    k_pre: int
    preflight: list  # ClockObservation
    transactions: dict  # step -> Transaction
    dropped: dict  # step -> bool
    prior_noise: np.ndarray  # (n, 9) standard normal draws for the pose prior
    height_noise: np.ndarray  # (K+1, n)

    def clock_at(self, tid, k):
        return self.clocks[tid][k + self.k_pre]

    def relative_truth(self, i: int, k: int) -> ExtendedPose:
        a, b = self.truth[0], self.truth[i]
        C0t = a.C[k].T
        return ExtendedPose(C0t @ b.C[k], C0t @ (b.v[k] - a.v[k]), C0t @ (b.r[k] - a.r[k]))

    def relative_truth_arrays(self):
        """Relative truth of all neighbours at all steps as (K+1, n, ...) arrays."""
        a = self.truth[0]
        C0t = np.swapaxes(a.C, -1, -2)
        C = np.stack([C0t @ b.C for b in self.truth[1:]], axis=1)
        v = np.stack([np.einsum("kij,kj->ki", C0t, b.v - a.v) for b in self.truth[1:]], axis=1)
        r = np.stack([np.einsum("kij,kj->ki", C0t, b.r - a.r) for b in self.truth[1:]], axis=1)
        return C, v, r

    def relative_clocks(self, k: int) -> np.ndarray:
        f0 = self.clock_at(F0, k)
        return np.array([self.clock_at(t, k) - f0 for t in clock_rows_order(self.cfg.n_robots - 1)])

    def transceiver_position(self, tid, k: int) -> np.ndarray:
        tr = self.truth[tid.robot]
        return tr.C[k] @ lever_arm(tid, self.cfg.half_baseline) + tr.r[k]


def _min_separation(truth) -> float:
    best = math.inf
    for a in range(len(truth)):
        for b in range(a + 1, len(truth)):
            best = min(best, float(np.linalg.norm(truth[a].r - truth[b].r, axis=1).min()))
    return best


def _draw_trajectories(cfg: ScenarioConfig, rng, max_tries: int = 200):
    """Draw trajectories for all robots, redrawing the whole set until no two
    robots come closer than ``cfg.min_separation``."""
    for _ in range(max_tries):
        trajs = [
            random_trajectory(
                rng, j, cfg.n_robots, cfg.duration, cfg.max_speed, cfg.max_rate, cfg.world_yaw, cfg.world_shift
            )
            for j in range(cfg.n_robots)
        ]
        truth = [sample_truth(tr, cfg.n_steps, cfg.dt) for tr in trajs]
        if _min_separation(truth) >= cfg.min_separation:
            return trajs, truth
    raise ConfigError(f"could not keep robots {cfg.min_separation} m apart; lower min_separation")


def _streams(seed: int, trial: int):
    ss = np.random.SeedSequence([int(seed), int(trial)])
    names = ("traj", "clock0", "clock", "imu", "stamps", "prior", "drops", "height")
    return {name: np.random.default_rng(s) for name, s in zip(names, ss.spawn(len(names)))}


def simulate_world(cfg: ScenarioConfig, trial: int = 0) -> World:
    cfg.validate()
    rs = _streams(cfg.seed, trial)
    n_r = cfg.n_robots
    K = cfg.n_steps
    dt = cfg.dt
    sps = cfg.steps_per_slot
    trajs, truth = _draw_trajectories(cfg, rs["traj"])
    gyros, accels, incs, jacs = [], [], [], []
    for tr in truth:
        g = tr.gyro + rs["imu"].normal(0.0, cfg.gyro_std, tr.gyro.shape)
        a = tr.accel + rs["imu"].normal(0.0, cfg.accel_std, tr.accel.shape)
        gyros.append(g)
        accels.append(a)
        incs.append(batch_increments(g, a, dt))
        jacs.append(batch_increment_jacobians(g, a, dt))

    tids = all_transceivers(n_r)
    # pre-flight: f0 and s0 range with every transceiver of the other robots,
    # robots at rest at their initial pose
    pre_pairs = [(own, t) for t in tids if t.robot != 0 for own in (F0, S0)]
    n_pre_tx = cfg.preflight_rounds * len(pre_pairs)
    k_pre = n_pre_tx * sps
    model = ClockNoiseModel(cfg.clock_q_tau, cfg.clock_q_gamma)
    clocks = {}
    for tid in tids:
        init = ClockState(
            rs["clock0"].normal(0.0, cfg.init_offset_std), rs["clock0"].normal(0.0, cfg.init_skew_std)
        )
        clocks[tid] = simulate_clock(model, dt, k_pre + K, rs["clock"], init, absolute=True)

    delays = (cfg.delay21, cfg.delay31)
    preflight = []
    rest = {t: truth[t.robot].C[0] @ lever_arm(t, cfg.half_baseline) + truth[t.robot].r[0] for t in tids}
    for j in range(n_pre_tx):
        k = -k_pre + j * sps
        own, target = pre_pairs[j % len(pre_pairs)]
        clk = {t: tuple(clocks[t][k + k_pre]) for t in (own, target)}
        tx = synthesize_timestamps(
            {own: rest[own], target: rest[target]}, clk, own, target, k * dt, cfg.timestamp_std, rs["stamps"], delays, listeners=()
        )
        pm = form_pseudomeasurements(tx, cfg.timestamp_std, listeners=())
        preflight.append(ClockObservation.from_pseudomeasurement(pm))

    schedule = build_schedule(n_r)
    transactions, dropped = {}, {}
    for slot, k in enumerate(range(sps, K + 1, sps)):
        a, b = scheduled_pair(schedule, slot)
        pos = {t: truth[t.robot].C[k] @ lever_arm(t, cfg.half_baseline) + truth[t.robot].r[k] for t in tids}
        clk = {t: tuple(clocks[t][k + k_pre]) for t in tids}
        transactions[k] = synthesize_timestamps(pos, clk, a, b, k * dt, cfg.timestamp_std, rs["stamps"], delays)
        dropped[k] = bool(rs["drops"].random() < cfg.drop_prob)

    return World(
        cfg=cfg,
        trajectories=trajs,
        truth=truth,
        increments=incs,
        jacobians=jacs,
        noisy_gyro=gyros,
        noisy_accel=accels,
        clocks=clocks,
        k_pre=k_pre,
        preflight=preflight,
        transactions=transactions,
        dropped=dropped,
        prior_noise=rs["prior"].standard_normal((n_r - 1, 9)),
        height_noise=rs["height"].standard_normal((K + 1, n_r - 1)),
    )


# ----------------------------------------------------------------------------
# running the estimator
# ----------------------------------------------------------------------------
@dataclass
class ScenarioResult:
    mode: str
    times: np.ndarray  # (K+1,)
    pose_errors: np.ndarray  # (K+1, n, 9)
    clock_errors: np.ndarray  # (K+1, 2n+1, 2)
    stds: np.ndarray  # (K+1, 2+13n) marginal standard deviations
    nees: np.ndarray  # (K+1,) full joint state
    nees_pose: np.ndarray  # (K+1,) pose blocks only
    measurement_counts: dict = field(default_factory=dict)
    rejected: int = 0
    accepted: int = 0
    trace: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.pose_errors.shape[1]


class _Accumulator:
    """A neighbour's outgoing RMI towards robot 0, built from precomputed data."""

    def __init__(self, world: World, robot: int, Qu: np.ndarray):
        C, v, r = world.increments[robot]
        self.C, self.v, self.r = C, v, r
        dt = world.cfg.dt
        # Ad(U_k^{-1}) for every step, from the closed-form inverse
        Ct = np.swapaxes(C, -1, -2)
        vi = -np.einsum("kij,kj->ki", Ct, v)
        ri = -np.einsum("kij,kj->ki", Ct, r - dt * v)
        self.Adinv = adjoint_de23_batch(Ct, vi, ri, -dt)
        L = world.jacobians[robot]
        self.LQL = L @ Qu @ np.swapaxes(L, -1, -2)
        self.dt = dt
        self.rmi = Rmi.empty(0)

    def advance(self, k: int) -> None:
        """Fold in increment k (covering [t_k, t_k+1])."""
        inc = Increment(self.C[k], self.v[k], self.r[k], self.dt)
        A = self.Adinv[k]
        cov = A @ self.rmi.covariance @ A.T + self.LQL[k]
        self.rmi = Rmi(self.rmi.increment @ inc, 0.5 * (cov + cov.T), (self.rmi.window[0], k + 1))

    def take(self) -> Rmi:
        out = self.rmi
        self.rmi = Rmi.empty(out.window[1])
        return out


def initial_nav(world: World) -> NavState:
    """Prior of robot 0's filter.

    Each neighbour's attitude, velocity and position are perturbed
    independently (attitude on the left, the other two additively), so the
    prior stds are physical errors in robot 0's frame.  The covariance is then
    expressed in the left-perturbation coordinates of the filter, where the
    attitude error also moves velocity and position by ``v^x dphi`` and
    ``r^x dphi``.
    """
    cfg = world.cfg
    n = cfg.n_robots - 1
    sig = np.array(
        [cfg.prior_attitude_std] * 3 + [cfg.prior_velocity_std] * 3 + [cfg.prior_position_std] * 3
    )
    poses = []
    P = np.zeros((state_dim(n), state_dim(n)))
    for i in range(1, n + 1):
        d = sig * world.prior_noise[i - 1]
        T = world.relative_truth(i, 0)
        That = ExtendedPose(so3_exp(d[0:3]) @ T.C, T.v + d[3:6], T.r + d[6:9])
        poses.append(That)
        M = np.eye(9)
        M[3:6, 0:3] = skew(That.v)
        M[6:9, 0:3] = skew(That.r)
        s = pose_index(i)
        P[s : s + 9, s : s + 9] = M @ np.diag(sig**2) @ M.T
    means, stds = initialize_clocks(world.preflight, n, t_ref=0.0, q_gamma=cfg.clock_q_gamma)
    for row, tid in enumerate(clock_rows_order(n)):
        c = clock_index(tid)
        P[c, c] = stds[row, 0] ** 2
        P[c + 1, c + 1] = stds[row, 1] ** 2
    return NavState(poses, means, P, step=0)


def _deliveries(mode: str, a: TransceiverId, b: TransceiverId):
    """(listeners flag, robots whose RMI reaches robot 0) for one transaction."""
    involved = 0 in (a.robot, b.robot)
    if mode == "no_passive":
        if not involved:
            return None, ()
        return False, tuple(r for r in (a.robot, b.robot) if r != 0)
    return mode == "proposed", tuple(r for r in (a.robot, b.robot) if r != 0)


def run_world(world: World, mode: str, record_trace: bool = False) -> ScenarioResult:
    """Replay a world through robot 0's estimator under one mode."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    cfg = world.cfg
    n = cfg.n_robots - 1
    K = cfg.n_steps
    dt = cfg.dt
    ecfg = cfg.estimator_config()
    est = Estimator(initial_nav(world), dt, ecfg)
    Qu = ecfg.imu_noise.covariance() * ecfg.inflation
    accs = {i: _Accumulator(world, i, Qu) for i in range(1, n + 1)}
    C0, v0, r0 = world.increments[0]
    L0s = world.jacobians[0]
    g0, a0 = world.noisy_gyro[0], world.noisy_accel[0]

    dim = state_dim(n)
    pose_err = np.zeros((K + 1, n, 9))
    clock_err = np.zeros((K + 1, 2 * n + 1, 2))
    stds = np.zeros((K + 1, dim))
    nees = np.zeros(K + 1)
    nees_pose = np.zeros(K + 1)
    pose_idx = np.concatenate([np.arange(pose_index(i), pose_index(i) + 9) for i in range(1, n + 1)])
    truth_C, truth_v, truth_r = world.relative_truth_arrays()
    counts: dict = {}
    accepted = rejected = 0

    # estimates and covariances are buffered and evaluated in chunks so
    # that the logarithms and NEES solves run vectorised
    chunk = 256
    buf_k, buf_C, buf_v, buf_r, buf_P = [], [], [], [], []

    def record(k):
        nav = est.nav
        P = nav.P.copy()
        Cs, vs, rs = [], [], []
        for i in range(1, n + 1):
            T = nav.poses[i - 1]
            if not is_valid_pose(T):
                pend = accs[i].rmi
                full = T @ pend.increment
                T = ExtendedPose(full.C, full.v, full.r)
                s = pose_index(i)
                Ad = adjoint_se23(T)
                P[s : s + 9, s : s + 9] += Ad @ pend.covariance @ Ad.T
            Cs.append(T.C)
            vs.append(T.v)
            rs.append(T.r)
        clock_err[k] = nav.clocks - world.relative_clocks(k)
        buf_k.append(k)
        buf_C.append(Cs)
        buf_v.append(vs)
        buf_r.append(rs)
        buf_P.append(P)
        if len(buf_k) >= chunk:
            flush()

    def flush():
        if not buf_k:
            return
        ks = np.array(buf_k)
        C = np.array(buf_C)  # (m, n, 3, 3)
        v = np.array(buf_v)
        r = np.array(buf_r)
        Pm = np.array(buf_P)
        # error Log(T_hat T^{-1}) with the truth inverse applied on the right
        Ct, vt, rt = truth_C[ks], truth_v[ks], truth_r[ks]
        Ce = C @ np.swapaxes(Ct, -1, -2)
        ve = v - np.einsum("...ij,...j->...i", Ce, vt)
        re = r - np.einsum("...ij,...j->...i", Ce, rt)
        e = log_se23_batch(Ce, ve, re)  # (m, n, 9)
        pose_err[ks] = e
        err = np.zeros((len(ks), dim))
        err[:, pose_idx] = e.reshape(len(ks), -1)
        err[:, est._clock_idx] = clock_err[ks].reshape(len(ks), -1)
        stds[ks] = np.sqrt(np.clip(np.diagonal(Pm, axis1=1, axis2=2), 0.0, None))
        nees[ks] = np.einsum("mi,mi->m", err, np.linalg.solve(Pm, err[..., None])[..., 0])
        ep = err[:, pose_idx]
        Pp = Pm[:, pose_idx[:, None], pose_idx[None, :]]
        nees_pose[ks] = np.einsum("mi,mi->m", ep, np.linalg.solve(Pp, ep[..., None])[..., 0])
        for lst in (buf_k, buf_C, buf_v, buf_r, buf_P):
            lst.clear()

    record(0)
    for k in range(1, K + 1):
        for acc in accs.values():
            acc.advance(k - 1)
        arrived = {}
        measurements = []
        heights = []
        robot0_active = False
        tx = world.transactions.get(k)
        if tx is not None:
            a, b = tx.initiator, tx.target
            robot0_active = 0 in (a.robot, b.robot)
            if not world.dropped[k]:
                passive, senders = _deliveries(mode, a, b)
                for r in senders:
                    rmi = accs[r].take()
                    arrived[r] = transmit_rmi(rmi) if cfg.wire_rmis else rmi
                if passive is not None:
                    pm = form_pseudomeasurements(tx, cfg.timestamp_std, listeners=None if passive else ())
                    measurements.append(pm)
                    counts[(str(a), str(b))] = counts.get((str(a), str(b)), 0) + 1
                if cfg.height_std is not None:
                    for r in senders:
                        z = world.relative_truth(r, k).r[2] + cfg.height_std * world.height_noise[k, r - 1]
                        heights.append((r, HeightMeasurement(z, cfg.height_std)))
        u0 = ImuSample(g0[k - 1], a0[k - 1], dt)
        U0 = Increment(C0[k - 1], v0[k - 1], r0[k - 1], dt)
        results = est.step(u0, arrived, measurements, robot0_active, heights, U0=U0, L0=L0s[k - 1])
        for res in results:
            if res.accepted:
                accepted += 1
            else:
                rejected += 1
        record(k)
    flush()

    return ScenarioResult(
        mode=mode,
        times=np.arange(K + 1) * dt,
        pose_errors=pose_err,
        clock_errors=clock_err,
        stds=stds,
        nees=nees,
        nees_pose=nees_pose,
        measurement_counts=counts,
        accepted=accepted,
        rejected=rejected,
        trace=est.trace if record_trace else [],
    )


def run_scenario(cfg: ScenarioConfig, trial: int = 0) -> ScenarioResult:
    return run_world(simulate_world(cfg, trial), cfg.mode)


def run_modes(cfg: ScenarioConfig, modes=MODES, trial: int = 0) -> dict:
    """Run several modes on one shared world (paired comparison)."""
    world = simulate_world(cfg, trial)
    return {m: run_world(world, m) for m in modes}


@dataclass
class TrialSummary:
    """Compact per-trial metrics of one mode."""

    trial: int
    mode: str
    position_rmse: np.ndarray  # (n,) per neighbour [m]
    attitude_rmse: np.ndarray  # (n,) per neighbour [rad]
    clock_offset_rmse: float  # neighbour transceivers [ns]
    nees: np.ndarray  # (K+1,) full-state NEES stream
    dim: int


def summarize(result: ScenarioResult, trial: int = 0) -> TrialSummary:
    e = result.pose_errors
    if not (np.all(np.isfinite(e)) and np.all(np.isfinite(result.nees))):
        raise NumericalError(f"non-finite estimate in trial {trial} ({result.mode})")
    clk = result.clock_errors[:, 1:, 0]
    return TrialSummary(
        trial=trial,
        mode=result.mode,
        position_rmse=np.sqrt(np.mean(np.sum(e[..., 6:9] ** 2, axis=-1), axis=0)),
        attitude_rmse=np.sqrt(np.mean(np.sum(e[..., 0:3] ** 2, axis=-1), axis=0)),
        clock_offset_rmse=float(np.sqrt(np.mean(clk * clk))),
        nees=result.nees,
        dim=result.stds.shape[1],
    )


def _trial_job(args):
    cfg, trial, modes = args
    return {m: summarize(r, trial) for m, r in run_modes(cfg, modes, trial).items()}


def run_monte_carlo(cfg: ScenarioConfig, n_trials: int, modes=MODES, workers: int = 1) -> dict:
    """Paired Monte Carlo campaign.

    Every trial draws one world (from ``cfg.seed`` and the trial index) and
    replays it under each mode.  Returns ``{mode: [TrialSummary, ...]}`` in
    trial order; the result does not depend on ``workers``.
    """
    cfg.validate()
    if n_trials < 1:
        raise ConfigError("n_trials must be at least 1")
    jobs = [(cfg, t, tuple(modes)) for t in range(n_trials)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_trial = list(pool.map(_trial_job, jobs))
    else:
        per_trial = [_trial_job(j) for j in jobs]
    return {m: [pt[m] for pt in per_trial] for m in modes}
