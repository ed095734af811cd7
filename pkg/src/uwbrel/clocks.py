"""Second-order transceiver clock model.

Units: offsets ``tau`` in nanoseconds, skews ``gamma`` in parts-per-billion,
time in seconds.  Because 1 ppb x 1 s = 1 ns the discrete transition needs no
scale factor: ``tau_{k+1} = tau_k + dt * gamma_k``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ClockState:
    tau: float  # [ns]
    gamma: float  # [ppb]

    def as_array(self) -> np.ndarray:
        return np.array([self.tau, self.gamma])


@dataclass(frozen=True)
class ClockNoiseModel:
    """Power spectral densities of one absolute clock."""

    q_tau: float = 0.4  # [ns^2/Hz]
    q_gamma: float = 640.0  # [ppb^2/Hz]

    def __post_init__(self):
        if self.q_tau < 0 or self.q_gamma < 0:
            raise ValueError("clock PSDs must be non-negative")


def clock_transition(dt: float) -> np.ndarray:
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return np.array([[1.0, dt], [0.0, 1.0]])


def _absolute_noise(dt: float, model: ClockNoiseModel) -> np.ndarray:
    qt, qg = model.q_tau, model.q_gamma
    return np.array(
        [
            [dt * qt + dt**3 * qg / 3.0, dt**2 * qg / 2.0],
            [dt**2 * qg / 2.0, dt * qg],
        ]
    )


def clock_process_noise(dt: float, model: ClockNoiseModel) -> np.ndarray:
    """Discrete noise of a clock *relative to f0* over ``dt``.

    Both clocks contribute independent noise with the absolute PSDs, hence
    the factor 2.
    """
    if dt < 0:
        raise ValueError("dt must be non-negative")
    return 2.0 * _absolute_noise(dt, model)


def clock_cross_covariance(dt: float, model: ClockNoiseModel) -> np.ndarray:
    """Cross-covariance between two relative clocks (shared f0 noise)."""
    return 0.5 * clock_process_noise(dt, model)


def joint_clock_noise(dt: float, model: ClockNoiseModel, m: int) -> np.ndarray:
    """(2m x 2m) noise of m relative clocks stacked as (tau_1, gamma_1, ...)."""
    Qd = clock_process_noise(dt, model)
    return np.kron(0.5 * (np.eye(m) + np.ones((m, m))), Qd)


def propagate_clock(mean, cov, dt: float, model: ClockNoiseModel):
    """One exact step of (mean, covariance) for a relative clock."""
    A = clock_transition(dt)
    return A @ np.asarray(mean, float), A @ cov @ A.T + clock_process_noise(dt, model)


def _psd_factor(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(M)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_clock(
    model: ClockNoiseModel,
    dt: float,
    n_steps: int,
    seed=None,
    initial: ClockState | None = None,
    absolute: bool = False,
) -> np.ndarray:
    """Sample a clock trajectory exactly on a grid of spacing ``dt``.

    Returns an ``(n_steps + 1, 2)`` array of ``(tau [ns], gamma [ppb])`` rows,
    starting with ``initial``.  With ``absolute=True`` the per-clock noise is
    used (half the relative-clock noise), so that differences of two simulated
    absolute clocks follow the relative model.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x0 = np.zeros(2) if initial is None else initial.as_array()
    Q = _absolute_noise(dt, model) if absolute else clock_process_noise(dt, model)
    w = rng.standard_normal((n_steps, 2)) @ _psd_factor(Q).T
    gamma = np.empty(n_steps + 1)
    gamma[0] = x0[1]
    gamma[1:] = x0[1] + np.cumsum(w[:, 1])
    tau = np.empty(n_steps + 1)
    tau[0] = x0[0]
    tau[1:] = x0[0] + np.cumsum(dt * gamma[:-1] + w[:, 0])
    return np.column_stack([tau, gamma])
