"""Double-sided two-way ranging with passive listening.

An initiator ``a`` sends three messages' worth of timestamps with a target
``b``::

    a: T1 ---------------> R2 ------- R3        (initiator clock)
    b:     R1 --Δt21--> T2 ----Δt31--> T3       (target clock, delays from R1)

and every other transceiver ``l`` within earshot records P1 (from a's first
message) and P2, P3 (from b's two replies).  All timestamps are in
nanoseconds and are reported relative to the transaction epoch (the global
time of T1), which keeps the arithmetic well conditioned.

Robot 0 turns one transaction into up to eight pseudomeasurements::

    y = (tof, tau, p1_f0, p2_f0, p3_f0, p1_s0, p2_s0, p3_s0)

Five of them when one of its own transceivers is active (only the other one
listens), two when passive listening is switched off.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field

import numpy as np

from .lie import ExtendedPose, odot
from .state import F0, S0, NavState, TransceiverId, clock_index, is_valid_pose, pose_index

SPEED_OF_LIGHT = 299_792_458.0  # [m/s]
NS_PER_M = 1e9 / SPEED_OF_LIGHT
DEFAULT_DELAYS = (300e-6, 600e-6)
DEFAULT_HALF_BASELINE = 0.225
MIN_REPLY_GAP_NS = 1.0
DISTANCE_EPS = 1e-9


class CoincidentTransceiversError(ValueError):
    pass


class MalformedTransactionError(ValueError):
    pass


def lever_arm(tid: TransceiverId, half_baseline: float = DEFAULT_HALF_BASELINE) -> np.ndarray:
    """Transceiver position in its robot's body frame (f forward, s aft)."""
    return np.array([half_baseline if tid.slot == 0 else -half_baseline, 0.0, 0.0])


def _homog(r) -> np.ndarray:
    return np.array([r[0], r[1], r[2], 0.0, 1.0])


def _point(T: ExtendedPose, lever) -> np.ndarray:
    return T.C @ lever + T.r


# ----------------------------------------------------------------------------
# distances
# ----------------------------------------------------------------------------
def transceiver_distance(T_a, T_b, lever_a, lever_b) -> float:
    """Distance between two transceivers given their robots' relative poses."""
    return float(np.linalg.norm(_point(T_b, lever_b) - _point(T_a, lever_a)))


def distance_jacobian(T_a, T_b, lever_a, lever_b):
    """Rows (1x9 each) of d(distance) w.r.t. left perturbations of T_a, T_b."""
    pa = _point(T_a, lever_a)
    pb = _point(T_b, lever_b)
    diff = pb - pa
    d = float(np.linalg.norm(diff))
    if d <= DISTANCE_EPS:
        raise CoincidentTransceiversError("transceivers coincide; distance is not differentiable")
    u = diff / d
    row_b = u @ odot(_homog(pb))[:3]
    row_a = -u @ odot(_homog(pa))[:3]
    return row_a[None, :], row_b[None, :]


# ----------------------------------------------------------------------------
# timestamp synthesis
# ----------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Transaction:
    initiator: TransceiverId
    target: TransceiverId
    delay21: float
    delay31: float
    epoch: float  # global time of T1 [s]
    T1: object
    R2: object
    R3: object
    R1: object
    T2: object
    T3: object
    passive: dict = field(default_factory=dict)  # listener -> (P1, P2, P3)

    def __post_init__(self):
        if self.initiator.robot == self.target.robot:
            raise ValueError("initiator and target must sit on different robots")
        if not self.delay31 > self.delay21 > 0:
            raise ValueError("delays must satisfy delay31 > delay21 > 0")

    @property
    def active(self):
        return (self.initiator, self.target)


def synthesize_timestamps(
    positions: dict,
    clocks: dict,
    initiator: TransceiverId,
    target: TransceiverId,
    epoch: float,
    sigma: float,
    rng,
    delays=DEFAULT_DELAYS,
    listeners=None,
    size=None,
) -> Transaction:
    """Generate all timestamps of one transaction.

    ``positions`` maps each transceiver to its world position [m] (held
    constant over the few hundred microseconds of the exchange), ``clocks``
    maps it to its absolute ``(tau [ns], gamma [ppb])`` at the epoch.  Clock
    offsets are evaluated at every event time with a linear flow.  Each
    timestamp gets independent N(0, sigma^2) noise; with ``size`` set, a whole
    batch of noise realisations is drawn at once.
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    d21, d31 = delays
    if listeners is None:
        listeners = sorted(k for k in positions if k not in (initiator, target))

    def dist(x, y):
        return float(np.linalg.norm(np.asarray(positions[x]) - np.asarray(positions[y])))

    def stamp(tid, t_rel):
        tau, gamma = clocks[tid]
        noise = rng.normal(0.0, sigma, size) if sigma > 0 else (0.0 if size is None else np.zeros(size))
        # gamma [ppb] * t [s] = ns
        return t_rel * 1e9 + tau + gamma * t_rel + noise

    tof = dist(initiator, target) / SPEED_OF_LIGHT
    T1 = stamp(initiator, 0.0)
    R1 = stamp(target, tof)
    T2 = stamp(target, tof + d21)
    R2 = stamp(initiator, 2 * tof + d21)
    T3 = stamp(target, tof + d31)
    R3 = stamp(initiator, 2 * tof + d31)
    passive = {}
    for ell in listeners:
        da = dist(initiator, ell) / SPEED_OF_LIGHT
        db = dist(target, ell) / SPEED_OF_LIGHT
        passive[ell] = (
            stamp(ell, da),
            stamp(ell, tof + d21 + db),
            stamp(ell, tof + d31 + db),
        )
    return Transaction(initiator, target, d21, d31, epoch, T1, R2, R3, R1, T2, T3, passive)


# ----------------------------------------------------------------------------
# pseudomeasurements
# ----------------------------------------------------------------------------
LABELS = ("tof", "tau", "p1_f0", "p2_f0", "p3_f0", "p1_s0", "p2_s0", "p3_s0")


@dataclass(frozen=True, eq=False)
class PseudoMeasurement:
    values: np.ndarray
    covariance: np.ndarray
    initiator: TransceiverId
    target: TransceiverId
    listeners: tuple  # robot-0 transceivers whose passive rows are included
    interval21: object  # measured T2 - R1 [s]
    interval31: object  # measured T3 - R1 [s]
    y_gamma: object  # measured skew of initiator relative to target [ppb]
    epoch: float = 0.0

    @property
    def dim(self) -> int:
        return 2 + 3 * len(self.listeners)

    @property
    def labels(self):
        out = ["tof", "tau"]
        for ell in self.listeners:
            out += [f"p{j}_{ell}" for j in (1, 2, 3)]
        return out

    def direct_only(self) -> "PseudoMeasurement":
        return PseudoMeasurement(
            self.values[:2],
            self.covariance[:2, :2],
            self.initiator,
            self.target,
            (),
            self.interval21,
            self.interval31,
            self.y_gamma,
            self.epoch,
        )


def reply_ratio(delays) -> float:
    """Weight of the skew-ratio noise in tof and tau, Δt21 / Δt32."""
    d21, d31 = delays
    return d21 / (d31 - d21)


def measurement_covariance(sigma: float, n_listeners: int = 2, delays=DEFAULT_DELAYS) -> np.ndarray:
    """Covariance of the stacked pseudomeasurements.

    The skew ratio (R3 - R2)/(T3 - T2) is itself noisy and multiplies the
    reply interval T2 - R1, so its noise enters tof and tau with weight
    ``k = Δt21/Δt32``.  With ``delays=None`` that contribution is dropped
    (k = 0, the short-reply limit), giving::

        [[s2 I2,      s2/2 D,   s2/2 D ],
         [s2/2 D^T,   2 s2 I3,  s2 I3  ],
         [s2/2 D^T,   s2 I3,    2 s2 I3]]     D = [[1, 1, 0], [-1, 1, 0]]
    """
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if n_listeners not in (0, 1, 2):
        raise ValueError("robot 0 has at most two listening transceivers")
    k = 0.0 if delays is None else reply_ratio(delays)
    s2 = sigma * sigma
    m = 2 + 3 * n_listeners
    R = np.zeros((m, m))
    direct_var = 0.5 + 0.5 * (1 + k) ** 2 + 0.5 * k * k
    R[0, 0] = R[1, 1] = direct_var * s2
    R[0, 1] = R[1, 0] = (direct_var - 1.0) * s2
    D = 0.5 * s2 * np.array([[1.0, 1.0 + k, -k], [-1.0, 1.0 + k, -k]])
    for j in range(n_listeners):
        s = slice(2 + 3 * j, 5 + 3 * j)
        R[0:2, s] = D
        R[s, 0:2] = D.T
        R[s, s] = 2.0 * s2 * np.eye(3)
        for jj in range(j):
            t = slice(2 + 3 * jj, 5 + 3 * jj)
            R[s, t] = s2 * np.eye(3)
            R[t, s] = s2 * np.eye(3)
    return R


def robot0_listeners(tx: Transaction):
    return tuple(t for t in (F0, S0) if t not in tx.active and t in tx.passive)


def form_pseudomeasurements(
    tx: Transaction,
    sigma: float,
    listeners=None,
    delays_for_covariance="nominal",
) -> PseudoMeasurement:
    """Combine the timestamps of one transaction into pseudomeasurements.

    ``listeners`` defaults to every robot-0 transceiver that is not active;
    pass ``()`` to keep only the direct (tof, tau) pair.
    """
    if listeners is None:
        listeners = robot0_listeners(tx)
    listeners = tuple(listeners)
    gap = tx.T3 - tx.T2
    if np.any(gap < MIN_REPLY_GAP_NS):
        raise MalformedTransactionError("reply gap T3 - T2 below 1 ns")
    ratio = (tx.R3 - tx.R2) / gap
    reply = tx.T2 - tx.R1
    rows = [
        0.5 * ((tx.R2 - tx.T1) - ratio * reply),
        0.5 * ((tx.R2 + tx.T1) - ratio * reply - 2.0 * tx.R1),
    ]
    for ell in listeners:
        P1, P2, P3 = tx.passive[ell]
        rows += [P1 - tx.T1, P2 - tx.T2, P3 - tx.T3]
    delays = (tx.delay21, tx.delay31) if delays_for_covariance == "nominal" else delays_for_covariance
    return PseudoMeasurement(
        values=np.array(rows),
        covariance=measurement_covariance(sigma, len(listeners), delays),
        initiator=tx.initiator,
        target=tx.target,
        listeners=listeners,
        interval21=reply * 1e-9,
        interval31=(tx.T3 - tx.R1) * 1e-9,
        y_gamma=(ratio - 1.0) * 1e9,
        epoch=tx.epoch,
    )


# ----------------------------------------------------------------------------
# measurement model on robot 0's state
# ----------------------------------------------------------------------------
def _robot_pose(nav: NavState, robot: int):
    T = nav.pose_of(robot)
    if not is_valid_pose(T):
        raise ValueError(f"pose of robot {robot} is an intermediate state")
    return T


def predict_pseudomeasurements(nav: NavState, pm: PseudoMeasurement, half_baseline=DEFAULT_HALF_BASELINE):
    a, b = pm.initiator, pm.target
    Ta, Tb = _robot_pose(nav, a.robot), _robot_pose(nav, b.robot)
    la, lb = lever_arm(a, half_baseline), lever_arm(b, half_baseline)
    ta, tb = nav.clock_of(a), nav.clock_of(b)
    out = [transceiver_distance(Ta, Tb, la, lb) * NS_PER_M, ta[0] - tb[0]]
    I = ExtendedPose.identity()
    for ell in pm.listeners:
        ll = lever_arm(ell, half_baseline)
        tl = nav.clock_of(ell)
        out.append(transceiver_distance(Ta, I, la, ll) * NS_PER_M + tl[0] - ta[0])
        base = transceiver_distance(Tb, I, lb, ll) * NS_PER_M + tl[0] - tb[0]
        out.append(base + (tl[1] - tb[1]) * pm.interval21)
        out.append(base + (tl[1] - tb[1]) * pm.interval31)
    return np.array(out)


def _add_pose_rows(H, row, robot, jac):
    if robot != 0:
        s = pose_index(robot)
        H[row, s : s + 9] += jac[0] * NS_PER_M


def _add_clock(H, row, tid, d_tau, d_gamma=0.0):
    c = clock_index(tid)
    if c is not None:
        H[row, c] += d_tau
        H[row, c + 1] += d_gamma


def measurement_jacobian(nav: NavState, pm: PseudoMeasurement, half_baseline=DEFAULT_HALF_BASELINE):
    """Jacobian of the stacked pseudomeasurements w.r.t. the full error state."""
    a, b = pm.initiator, pm.target
    Ta, Tb = _robot_pose(nav, a.robot), _robot_pose(nav, b.robot)
    la, lb = lever_arm(a, half_baseline), lever_arm(b, half_baseline)
    H = np.zeros((pm.dim, 2 + 13 * nav.n))
    ja, jb = distance_jacobian(Ta, Tb, la, lb)
    _add_pose_rows(H, 0, a.robot, ja)
    _add_pose_rows(H, 0, b.robot, jb)
    _add_clock(H, 1, a, 1.0)
    _add_clock(H, 1, b, -1.0)
    I = ExtendedPose.identity()
    for j, ell in enumerate(pm.listeners):
        r = 2 + 3 * j
        ll = lever_arm(ell, half_baseline)
        ja_l, _ = distance_jacobian(Ta, I, la, ll)
        jb_l, _ = distance_jacobian(Tb, I, lb, ll)
        _add_pose_rows(H, r, a.robot, ja_l)
        _add_clock(H, r, ell, 1.0)
        _add_clock(H, r, a, -1.0)
        for rr, interval in ((r + 1, pm.interval21), (r + 2, pm.interval31)):
            _add_pose_rows(H, rr, b.robot, jb_l)
            _add_clock(H, rr, ell, 1.0, interval)
            _add_clock(H, rr, b, -1.0, -interval)
    return H


# ----------------------------------------------------------------------------
# measurement accounting
# ----------------------------------------------------------------------------
@dataclass(frozen=True)
class MeasurementCounts:
    pairs: int
    direct: int
    passive: int
    centralized_fold: float
    individual_fold: float
    individual_without: int
    individual_with: int


def cross_robot_pairs(n_robots: int):
    """Unordered transceiver pairs on distinct robots, in a fixed order."""
    tids = [TransceiverId(r, s) for r in range(n_robots) for s in (0, 1)]
    return [(x, y) for x, y in itertools.combinations(tids, 2) if x.robot != y.robot]


def enumerate_measurements(n: int) -> MeasurementCounts:
    """Count measurements by walking every pair and every listener."""
    n_robots = n + 1
    n_t = 2 * n_robots
    direct = passive = 0
    own_direct = own_new_direct = own_passive = 0
    for x, y in cross_robot_pairs(n_robots):
        direct += 2
        passive += 3 * (n_t - 2)
        if 0 in (x.robot, y.robot):
            own_direct += 2
        else:
            own_new_direct += 2
        own_passive += 3 * sum(1 for t in (F0, S0) if t not in (x, y))
    pairs = direct // 2
    with_listening = own_direct + own_new_direct + own_passive
    return MeasurementCounts(
        pairs=pairs,
        direct=direct,
        passive=passive,
        centralized_fold=(direct + passive) / direct if direct else 1.0,
        individual_fold=with_listening / own_direct if own_direct else float("nan"),
        individual_without=own_direct,
        individual_with=with_listening,
    )


def measurement_counts(n: int) -> MeasurementCounts:
    """Closed-form counts for n neighbours (n + 1 robots, two transceivers each)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    pairs = 2 * n * (n + 1)
    return MeasurementCounts(
        pairs=pairs,
        direct=2 * pairs,
        passive=6 * n * pairs,
        centralized_fold=1.0 + 3.0 * n,
        individual_fold=0.5 + 2.0 * n,
        individual_without=8 * n,
        individual_with=2 * pairs + 12 * n * n,
    )


# ----------------------------------------------------------------------------
# CSV log
# ----------------------------------------------------------------------------
TRANSACTION_COLUMNS = (
    "epoch_s",
    "initiator",
    "target",
    "delay21_s",
    "delay31_s",
    "T1_ns",
    "R2_ns",
    "R3_ns",
    "R1_ns",
    "T2_ns",
    "T3_ns",
    "passive",  # "f0:P1:P2:P3;s0:P1:P2:P3;..."
)


def transaction_row(tx: Transaction):
    passive = ";".join(
        f"{k}:{float(p1)!r}:{float(p2)!r}:{float(p3)!r}" for k, (p1, p2, p3) in sorted(tx.passive.items())
    )
    return [
        repr(float(tx.epoch)),
        str(tx.initiator),
        str(tx.target),
        repr(float(tx.delay21)),
        repr(float(tx.delay31)),
        *(repr(float(getattr(tx, k))) for k in ("T1", "R2", "R3", "R1", "T2", "T3")),
        passive,
    ]


def write_transaction_log(path, transactions) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRANSACTION_COLUMNS)
        for tx in transactions:
            w.writerow(transaction_row(tx))


def read_transaction_log(path):
    out = []
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        if tuple(header) != TRANSACTION_COLUMNS:
            raise ValueError("unexpected transaction log header")
        for row in rd:
            passive = {}
            if row[11]:
                for item in row[11].split(";"):
                    name, p1, p2, p3 = item.split(":")
                    passive[TransceiverId.parse(name)] = (float(p1), float(p2), float(p3))
            out.append(
                Transaction(
                    TransceiverId.parse(row[1]),
                    TransceiverId.parse(row[2]),
                    float(row[3]),
                    float(row[4]),
                    float(row[0]),
                    *(float(x) for x in row[5:11]),
                    passive=passive,
                )
            )
    return out
