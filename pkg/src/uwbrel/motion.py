"""Relative extended-pose kinematics driven by two IMUs.

The relative pose T_0i of robot i with respect to robot 0 obeys the
differential Sylvester equation ``dT/dt = -U0~ T + T Ui~`` where ``Uj~`` is
the 5x5 generator built from robot j's gyro and accelerometer.  Over one IMU
step with constant inputs the solution is ``T_{k+1} = U0^{-1} T_k Ui`` with
``Uj = expm(Uj~ dt)`` available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lie import (
    ExtendedPose,
    Increment,
    adjoint_de23,
    adjoint_se23,
    left_jacobian_se23,
    left_jacobian_so3,
    left_jacobian_so3_inv,
    n_matrix,
    skew,
    so3_exp,
)

GRAVITY = np.array([0.0, 0.0, -9.81])


@dataclass(frozen=True, eq=False)
class ImuSample:
    gyro: np.ndarray  # [rad/s]
    accel: np.ndarray  # specific force [m/s^2]
    dt: float  # [s]

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("IMU sample dt must be positive")

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.gyro, self.accel])


@dataclass(frozen=True)
class ImuNoiseModel:
    """Discrete per-sample white noise on gyro and accelerometer."""

    gyro_std: float = 0.0066
    accel_std: float = 0.023

    def __post_init__(self):
        if self.gyro_std < 0 or self.accel_std < 0:
            raise ValueError("IMU noise std must be non-negative")

    def covariance(self) -> np.ndarray:
        return np.diag([self.gyro_std**2] * 3 + [self.accel_std**2] * 3)


def generator(u: ImuSample) -> np.ndarray:
    """Continuous-time 5x5 input generator [[w^x, a, 0], [0, 0, 1], [0, 0, 0]]."""
    G = np.zeros((5, 5))
    G[:3, :3] = skew(u.gyro)
    G[:3, 3] = u.accel
    G[3, 4] = 1.0
    return G


def build_increment(u: ImuSample) -> Increment:
    """Exact exponential of the generator over one sample period."""
    dt = u.dt
    Omega = np.asarray(u.gyro, float) * dt
    a = np.asarray(u.accel, float)
    C = so3_exp(Omega)
    v = dt * (left_jacobian_so3(Omega) @ a)
    r = 0.5 * dt * dt * (n_matrix(Omega) @ a)
    return Increment(C, v, r, dt)


def input_factor(u: ImuSample) -> np.ndarray:
    """The 9x6 matrix V with U = M(dt) Exp(V u)."""
    dt = u.dt
    Omega = np.asarray(u.gyro, float) * dt
    V = np.zeros((9, 6))
    V[0:3, 0:3] = dt * np.eye(3)
    V[3:6, 3:6] = dt * np.eye(3)
    V[6:9, 3:6] = 0.5 * dt * dt * (left_jacobian_so3_inv(Omega) @ n_matrix(Omega))
    return V


def increment_jacobian(u: ImuSample) -> np.ndarray:
    """L = J_l(-V u) V, the right-perturbation Jacobian of U w.r.t. u.

    Perturbations of V itself are neglected, which is accurate for high-rate
    IMUs.
    """
    V = input_factor(u)
    return left_jacobian_se23(-V @ u.vector) @ V


def propagate_pose(T: ExtendedPose, U0: Increment, Ui: Increment) -> ExtendedPose:
    if abs(U0.dt - Ui.dt) > 1e-12:
        raise ValueError("both increments must span the same interval")
    out = U0.inverse() @ T @ Ui
    return ExtendedPose(out.C, out.v, out.r)


def pose_state_jacobian(U0: Increment) -> np.ndarray:
    return adjoint_de23(U0.inverse())


def input_noise_jacobians(u0: ImuSample, ui: ImuSample, T_next: ExtendedPose):
    """Jacobians of the propagated relative pose w.r.t. both IMU noises."""
    return -increment_jacobian(u0), adjoint_se23(T_next) @ increment_jacobian(ui)


def check_psd(P: np.ndarray, what: str = "covariance") -> None:
    if not np.allclose(P, P.T, atol=1e-9 * max(1.0, np.abs(P).max())):
        raise ValueError(f"{what} is not symmetric")
    scale = max(np.trace(P), 1e-300)
    if np.linalg.eigvalsh(0.5 * (P + P.T)).min() < -1e-9 * scale:
        raise ValueError(f"{what} is not positive semidefinite")


def propagate_pose_covariance(
    P: np.ndarray,
    U0: Increment,
    L0: np.ndarray,
    neighbour_jacobians,
    noise: ImuNoiseModel,
    check: bool = True,
) -> np.ndarray:
    """Propagate the joint covariance of n relative poses by one step.

    ``P`` is (9n x 9n).  ``neighbour_jacobians[j]`` is ``Ad(T_next) L_i`` of
    the j-th neighbour, or None when that neighbour's input is not applied in
    this step.  Robot 0's noise enters every block through the same ``-L0``,
    which is what correlates the neighbours.
    """
    if check:
        check_psd(P)
    n = len(neighbour_jacobians)
    A0 = pose_state_jacobian(U0)
    A = np.kron(np.eye(n), A0)
    Q = noise.covariance()
    G = np.vstack([-L0] * n)
    P = A @ P @ A.T + G @ Q @ G.T
    for j, B in enumerate(neighbour_jacobians):
        if B is not None:
            s = slice(9 * j, 9 * j + 9)
            P[s, s] += B @ Q @ B.T
    return 0.5 * (P + P.T)


def relative_pose(
    C_a0, v_a0, r_a0, C_ai, v_ai, r_ai
) -> ExtendedPose:
    """Relative extended pose of robot i resolved in robot 0's body frame."""
    C0t = np.asarray(C_a0).T
    return ExtendedPose(C0t @ C_ai, C0t @ (v_ai - v_a0), C0t @ (r_ai - r_a0))
