"""Error metrics, NEES consistency statistics and mode-comparison tables.

All functions are pure; the CSV writers at the bottom format floats with a
fixed ``repr``-free format so that identical inputs give identical bytes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2

CONFIDENCE = 0.9973  # two-sided, the usual 3-sigma equivalent
FLOAT_FORMAT = ".10g"

ATTITUDE = slice(0, 3)
VELOCITY = slice(3, 6)
POSITION = slice(6, 9)


def rmse(errors) -> float:
    """sqrt(mean_k e_k^T e_k) over a sequence of error vectors (rows)."""
    e = np.asarray(errors, dtype=float)
    if e.size == 0:
        raise ValueError("rmse needs at least one error sample")
    e = e.reshape(e.shape[0], -1) if e.ndim > 1 else e[:, None]
    return float(np.sqrt(np.mean(np.sum(e * e, axis=1))))


def rmse_position(errors) -> float:
    return rmse(np.asarray(errors, dtype=float)[..., POSITION])


def rmse_attitude(errors) -> float:
    return rmse(np.asarray(errors, dtype=float)[..., ATTITUDE])


def nees(e, P) -> float:
    """Normalised estimation error squared e^T P^{-1} e."""
    e = np.atleast_1d(np.asarray(e, dtype=float))
    P = np.atleast_2d(np.asarray(P, dtype=float))
    return float(e @ np.linalg.solve(P, e))


def nees_bounds(dim: int, n_trials: int, confidence: float = CONFIDENCE):
    """Two-sided chi-square band for the trial-averaged NEES."""
    dof = dim * n_trials
    tail = 0.5 * (1.0 - confidence)
    return float(chi2.ppf(tail, dof) / n_trials), float(chi2.ppf(1.0 - tail, dof) / n_trials)


@dataclass
class NeesSummary:
    mean: np.ndarray  # (K,) average over trials
    dim: int
    n_trials: int
    lower: float
    upper: float

    @property
    def per_dof(self) -> np.ndarray:
        return self.mean / self.dim

    def time_average(self, discard: float = 0.2) -> float:
        """Per-dof NEES averaged over time after dropping the leading fraction."""
        start = int(np.floor(discard * self.mean.size))
        return float(np.mean(self.per_dof[start:]))

    def fraction_inside(self, discard: float = 0.0) -> float:
        start = int(np.floor(discard * self.mean.size))
        m = self.mean[start:]
        return float(np.mean((m >= self.lower) & (m <= self.upper)))


def average_nees(trials, dim: int, confidence: float = CONFIDENCE) -> NeesSummary:
    """Average NEES streams of shape (n_trials, K) and attach the chi-square band."""
    arr = np.atleast_2d(np.asarray(trials, dtype=float))
    lo, hi = nees_bounds(dim, arr.shape[0], confidence)
    return NeesSummary(arr.mean(axis=0), dim, arr.shape[0], lo, hi)


# ----------------------------------------------------------------------------
# aRMSE and comparison tables
# ----------------------------------------------------------------------------
def position_rmse_per_robot(pose_errors) -> np.ndarray:
    """RMSE of each neighbour's position error; ``pose_errors`` is (K, n, 9)."""
    e = np.asarray(pose_errors, dtype=float)[..., POSITION]
    return np.sqrt(np.mean(np.sum(e * e, axis=-1), axis=0))


def attitude_rmse_per_robot(pose_errors) -> np.ndarray:
    e = np.asarray(pose_errors, dtype=float)[..., ATTITUDE]
    return np.sqrt(np.mean(np.sum(e * e, axis=-1), axis=0))


def clock_offset_rmse(clock_errors, neighbours_only: bool = True) -> float:
    """RMSE of relative clock offsets [ns]; ``clock_errors`` is (K, 2n+1, 2).

    Row 0 is robot 0's own second transceiver; it is skipped when
    ``neighbours_only`` is set.
    """
    e = np.asarray(clock_errors, dtype=float)[..., 0]
    if neighbours_only:
        e = e[:, 1:]
    return float(np.sqrt(np.mean(e * e)))


def armse(per_trial_per_robot) -> float:
    """Average of per-robot RMSEs over all robots and trials."""
    return float(np.mean(np.asarray(per_trial_per_robot, dtype=float)))


def percentage_change(proposed: float, comparison: float) -> float:
    """100 (proposed - comparison) / comparison."""
    if comparison == 0:
        raise ZeroDivisionError("comparison value is zero")
    return 100.0 * (proposed - comparison) / comparison


TABLE_COLUMNS = (
    "n_robots",
    "centralized",
    "no_passive",
    "proposed",
    "change_vs_centralized_pct",
    "change_vs_no_passive_pct",
)


def comparison_table(rows: dict) -> list:
    """Build Table-II style rows.

    ``rows`` maps a robot count to ``{mode: aRMSE}`` with all three modes.
    Returns a list of dicts keyed by :data:`TABLE_COLUMNS`, sorted by robot count.
    """
    out = []
    for n_robots in sorted(rows):
        r = rows[n_robots]
        missing = {"centralized", "no_passive", "proposed"} - set(r)
        if missing:
            raise ValueError(f"missing modes for {n_robots} robots: {sorted(missing)}")
        out.append(
            {
                "n_robots": n_robots,
                "centralized": r["centralized"],
                "no_passive": r["no_passive"],
                "proposed": r["proposed"],
                "change_vs_centralized_pct": percentage_change(r["proposed"], r["centralized"]),
                "change_vs_no_passive_pct": percentage_change(r["proposed"], r["no_passive"]),
            }
        )
    return out


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------
def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return format(float(x), FLOAT_FORMAT)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(x) for x in row])


def write_pose_errors(path, times, pose_errors, stds) -> None:
    """One row per step with every neighbour's 9 errors and 3-sigma bounds.

    ``stds`` holds the pose-block marginal stds with the same shape as
    ``pose_errors`` (K, n, 9).
    """
    names = ("phi_x", "phi_y", "phi_z", "nu_x", "nu_y", "nu_z", "rho_x", "rho_y", "rho_z")
    n = pose_errors.shape[1]
    header = ["t"]
    for i in range(1, n + 1):
        header += [f"r{i}_{c}" for c in names]
        header += [f"r{i}_{c}_3sigma" for c in names]
    rows = []
    for k in range(len(times)):
        row = [times[k]]
        for i in range(n):
            row += list(pose_errors[k, i]) + list(3.0 * stds[k, i])
        rows.append(row)
    write_rows(path, header, rows)


def write_clock_errors(path, times, clock_errors, clock_stds, labels) -> None:
    header = ["t"]
    for lab in labels:
        header += [f"{lab}_tau", f"{lab}_gamma", f"{lab}_tau_3sigma", f"{lab}_gamma_3sigma"]
    rows = []
    for k in range(len(times)):
        row = [times[k]]
        for j in range(len(labels)):
            row += [clock_errors[k, j, 0], clock_errors[k, j, 1], 3 * clock_stds[k, j, 0], 3 * clock_stds[k, j, 1]]
        rows.append(row)
    write_rows(path, header, rows)


def write_nees(path, times, summary: NeesSummary) -> None:
    header = ["t", "nees", "nees_per_dof", "lower", "upper", "lower_per_dof", "upper_per_dof"]
    rows = [
        [
            times[k],
            summary.mean[k],
            summary.mean[k] / summary.dim,
            summary.lower,
            summary.upper,
            summary.lower / summary.dim,
            summary.upper / summary.dim,
        ]
        for k in range(len(times))
    ]
    write_rows(path, header, rows)


def write_table(path, table) -> None:
    write_rows(path, TABLE_COLUMNS, [[row[c] for c in TABLE_COLUMNS] for row in table])
