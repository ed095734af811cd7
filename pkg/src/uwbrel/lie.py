"""Matrix Lie group core: SO(3), SE_2(3) and the DE_2(3) input group.

Tangent vectors of SE_2(3) are ordered ``(attitude, velocity, position)``::

    xi^ = [[phi^x, nu, rho],
           [0,     0,  0  ],
           [0,     0,  0  ]]

DE_2(3) elements carry an extra time slot and embed as::

    U = [[C, v, r ],
         [0, 1, dt],
         [0, 0, 1 ]]

Group elements are stored factored as ``(C, v, r[, dt])`` rather than as raw
5x5 matrices, so every product stays on the group by construction.

Most SO(3) helpers accept either a single 3-vector or a stack of shape
``(..., 3)``; the stacked path is used by the simulator to build truth and
IMU data for a whole trajectory at once.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from math import factorial

import numpy as np

# Below this rotation angle the trigonometric coefficients are evaluated from
# their Taylor series.  The closed forms of the higher-order coefficients lose
# many digits to cancellation well above 1e-7 rad, so the switch happens early.
SERIES_THRESHOLD = 0.25
_N_SERIES = 8

_I3 = np.eye(3)


class BranchAmbiguityWarning(RuntimeWarning):
    """Raised (as a warning) when a logarithm is taken at a rotation of pi."""


# ----------------------------------------------------------------------------
# scalar coefficient functions
# ----------------------------------------------------------------------------
def _series_coefficients(shift, weight=lambda k: 1.0):
    return tuple(((-1) ** k) * weight(k) / factorial(2 * k + shift) for k in range(_N_SERIES))


# coefficients (in powers of phi^2) of a1 .. a5
_A_SERIES = (
    _series_coefficients(1),
    _series_coefficients(2),
    _series_coefficients(3),
    _series_coefficients(4),
    _series_coefficients(5, lambda k: k + 1),
)


def _horner(coefs, x):
    total = coefs[-1]
    for c in coefs[-2::-1]:
        total = total * x + c
    return total


_D_SERIES = (1 / 12, 1 / 720, 1 / 30240, 1 / 1209600, 1 / 47900160)


def _coefficients(phi):
    """Return the coefficients used by the SO(3)/SE_2(3) closed forms.

    With X = psi^x and phi = |psi|:

    * a1 = sin(phi)/phi
    * a2 = (1 - cos(phi))/phi^2
    * a3 = (phi - sin(phi))/phi^3
    * a4 = (phi^2 + 2cos(phi) - 2)/(2 phi^4)
    * a5 = (2phi - 3sin(phi) + phi cos(phi))/(2 phi^5)

    Works for python floats and numpy arrays alike.
    """
    if np.ndim(phi) == 0:
        phi = float(phi)
        if phi < SERIES_THRESHOLD:
            p2 = phi * phi
            return tuple(_horner(c, p2) for c in _A_SERIES)
        s, c = math.sin(phi), math.cos(phi)
        p2 = phi * phi
        return (
            s / phi,
            (1.0 - c) / p2,
            (phi - s) / (p2 * phi),
            (p2 + 2.0 * c - 2.0) / (2.0 * p2 * p2),
            (2.0 * phi - 3.0 * s + phi * c) / (2.0 * p2 * p2 * phi),
        )
    phi = np.asarray(phi, dtype=float)
    small = phi < SERIES_THRESHOLD
    ps = np.where(small, 1.0, phi)
    s, c = np.sin(ps), np.cos(ps)
    p2s = ps * ps
    closed = (
        s / ps,
        (1.0 - c) / p2s,
        (ps - s) / (p2s * ps),
        (p2s + 2.0 * c - 2.0) / (2.0 * p2s * p2s),
        (2.0 * ps - 3.0 * s + ps * c) / (2.0 * p2s * p2s * ps),
    )
    p2 = phi * phi
    series = tuple(_horner(c, p2) for c in _A_SERIES)
    return tuple(np.where(small, ser, clo) for ser, clo in zip(series, closed))


def _inv_coefficient(phi):
    """(1 - (phi/2) cot(phi/2)) / phi^2, the X^2 weight of J_l^{-1}."""
    if np.ndim(phi) == 0:
        phi = float(phi)
        if phi < SERIES_THRESHOLD:
            p2 = phi * phi
            return _horner(_D_SERIES, p2)
        return 1.0 / (phi * phi) - (1.0 + math.cos(phi)) / (2.0 * phi * math.sin(phi))
    phi = np.asarray(phi, dtype=float)
    small = phi < SERIES_THRESHOLD
    ps = np.where(small, 1.0, phi)
    closed = 1.0 / (ps * ps) - (1.0 + np.cos(ps)) / (2.0 * ps * np.sin(ps))
    p2 = phi * phi
    series = _horner(_D_SERIES, p2)
    return np.where(small, series, closed)


# ----------------------------------------------------------------------------
# SO(3)
# ----------------------------------------------------------------------------
def skew(v):
    """Cross-product matrix of a 3-vector, or of a stack of them."""
    v = np.asarray(v, dtype=float)
    if v.ndim == 1:
        x, y, z = v
        return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    out = np.zeros(v.shape[:-1] + (3, 3))
    out[..., 0, 1] = -v[..., 2]
    out[..., 0, 2] = v[..., 1]
    out[..., 1, 0] = v[..., 2]
    out[..., 1, 2] = -v[..., 0]
    out[..., 2, 0] = -v[..., 1]
    out[..., 2, 1] = v[..., 0]
    return out


def unskew(m):
    m = np.asarray(m, dtype=float)
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def _poly(X, a0, a1, a2):
    """a0 I + a1 X + a2 X^2 for a single matrix or a stack."""
    X2 = X @ X
    if X.ndim == 2:
        return a0 * _I3 + a1 * X + a2 * X2
    a0, a1, a2 = (np.asarray(a, dtype=float)[..., None, None] for a in (a0, a1, a2))
    return a0 * _I3 + a1 * X + a2 * X2


def _angle(psi):
    psi = np.asarray(psi, dtype=float)
    if psi.ndim == 1:
        return psi, math.sqrt(psi[0] * psi[0] + psi[1] * psi[1] + psi[2] * psi[2])
    return psi, np.linalg.norm(psi, axis=-1)


def so3_exp(psi):
    """Rotation matrix Exp(psi) via Rodrigues' formula."""
    psi, phi = _angle(psi)
    a1, a2, *_ = _coefficients(phi)
    return _poly(skew(psi), 1.0, a1, a2)


def so3_log(C):
    """Principal logarithm of a rotation matrix (single 3x3 only).

    At an angle of exactly pi the axis sign is ambiguous; the axis whose
    leading nonzero component is positive is returned and a
    :class:`BranchAmbiguityWarning` is emitted.
    """
    C = np.asarray(C, dtype=float)
    w = 0.5 * np.array([C[2, 1] - C[1, 2], C[0, 2] - C[2, 0], C[1, 0] - C[0, 1]])
    sin_phi = math.sqrt(w @ w)
    cos_phi = 0.5 * (C[0, 0] + C[1, 1] + C[2, 2] - 1.0)
    phi = math.atan2(sin_phi, cos_phi)
    if phi < SERIES_THRESHOLD:
        return w / _coefficients(phi)[0]
    if math.pi - phi > 1e-6:
        return (phi / sin_phi) * w
    # Close to pi: the symmetric part carries the axis.
    B = 0.5 * (C + C.T) - cos_phi * _I3
    j = int(np.argmax(np.diag(B)))
    axis = B[:, j] / math.sqrt(max(B[j, j], 1e-300))
    axis = axis / np.linalg.norm(axis)
    if sin_phi > 1e-12:
        if axis @ w < 0.0:
            axis = -axis
    else:
        lead = axis[np.flatnonzero(np.abs(axis) > 1e-12)[0]]
        if lead < 0.0:
            axis = -axis
        warnings.warn(
            "logarithm taken at a rotation angle of pi; axis sign chosen by convention",
            BranchAmbiguityWarning,
            stacklevel=2,
        )
    return phi * axis


def so3_log_batch(C):
    """Vectorised logarithm for stacks of rotations away from angle pi."""
    C = np.asarray(C, dtype=float)
    w = 0.5 * unskew(C - np.swapaxes(C, -1, -2))
    sin_phi = np.linalg.norm(w, axis=-1)
    cos_phi = 0.5 * (np.trace(C, axis1=-2, axis2=-1) - 1.0)
    phi = np.arctan2(sin_phi, cos_phi)
    if np.any(math.pi - phi < 1e-6):
        raise ValueError("so3_log_batch does not handle rotations near pi")
    a1 = _coefficients(phi)[0]
    return w / a1[..., None]


def left_jacobian_so3(psi):
    """Left Jacobian J_l(psi) = sum_l (psi^x)^l / (l+1)!."""
    psi, phi = _angle(psi)
    _, a2, a3, _, _ = _coefficients(phi)
    return _poly(skew(psi), 1.0, a2, a3)


def left_jacobian_so3_inv(psi):
    psi, phi = _angle(psi)
    return _poly(skew(psi), 1.0, -0.5, _inv_coefficient(phi))


def n_matrix(psi):
    """N(psi) = 2 sum_l (psi^x)^l / (l+2)!, used for the position increment."""
    psi, phi = _angle(psi)
    _, _, a3, a4, _ = _coefficients(phi)
    return _poly(skew(psi), 1.0, 2.0 * a3, 2.0 * a4)


def normalize_rotation(C):
    """Project a nearly orthonormal matrix onto SO(3) (polar decomposition)."""
    U, _, Vt = np.linalg.svd(C)
    R = U @ Vt
    if np.linalg.det(R) < 0:
        U[:, -1] = -U[:, -1]
        R = U @ Vt
    return R


# ----------------------------------------------------------------------------
# group elements
# ----------------------------------------------------------------------------
class _GroupOps:
    """Shared product and inverse for the factored 5x5 representation."""

    C: np.ndarray
    v: np.ndarray
    r: np.ndarray

    @property
    def delta_t(self) -> float:
        return getattr(self, "dt", 0.0)

    def __matmul__(self, other):
        C1, v1, r1, t1 = self.C, self.v, self.r, self.delta_t
        t2 = other.delta_t
        C = C1 @ other.C
        v = C1 @ other.v + v1
        r = C1 @ other.r + v1 * t2 + r1
        if isinstance(self, Increment) or isinstance(other, Increment):
            return Increment(C, v, r, t1 + t2)
        return ExtendedPose(C, v, r)

    def inverse(self):
        Ct = self.C.T
        dt = self.delta_t
        v = -Ct @ self.v
        r = -Ct @ (self.r - dt * self.v)
        if isinstance(self, Increment):
            return Increment(Ct, v, r, -dt)
        return ExtendedPose(Ct, v, r)

    def matrix(self) -> np.ndarray:
        M = np.eye(5)
        M[:3, :3] = self.C
        M[:3, 3] = self.v
        M[:3, 4] = self.r
        M[3, 4] = self.delta_t
        return M


@dataclass(frozen=True, eq=False)
class ExtendedPose(_GroupOps):
    """SE_2(3) element (attitude, velocity, position)."""

    C: np.ndarray
    v: np.ndarray
    r: np.ndarray

    @staticmethod
    def identity() -> "ExtendedPose":
        return ExtendedPose(np.eye(3), np.zeros(3), np.zeros(3))

    @staticmethod
    def from_matrix(M) -> "ExtendedPose":
        M = np.asarray(M, dtype=float)
        return ExtendedPose(M[:3, :3].copy(), M[:3, 3].copy(), M[:3, 4].copy())

    def normalized(self) -> "ExtendedPose":
        return ExtendedPose(normalize_rotation(self.C), self.v, self.r)


@dataclass(frozen=True, eq=False)
class Increment(_GroupOps):
    """DE_2(3) element: an extended pose plus a time slot ``dt`` [s].

    One-step IMU input matrices, accumulated motion increments and the
    intermediate states of the asynchronous filter all live here.
    """

    C: np.ndarray
    v: np.ndarray
    r: np.ndarray
    dt: float = 0.0

    @staticmethod
    def identity(dt: float = 0.0) -> "Increment":
        return Increment(np.eye(3), np.zeros(3), np.zeros(3), float(dt))

    @staticmethod
    def from_matrix(M) -> "Increment":
        M = np.asarray(M, dtype=float)
        return Increment(M[:3, :3].copy(), M[:3, 3].copy(), M[:3, 4].copy(), float(M[3, 4]))

    @staticmethod
    def from_pose(T: ExtendedPose, dt: float = 0.0) -> "Increment":
        return Increment(T.C, T.v, T.r, float(dt))

    def pose(self) -> ExtendedPose:
        """Pose part, ignoring the time slot."""
        return ExtendedPose(self.C, self.v, self.r)

    def normalized(self) -> "Increment":
        return Increment(normalize_rotation(self.C), self.v, self.r, self.dt)


def time_machine(dt: float) -> Increment:
    """Increment with identity pose part; shifts only the time slot."""
    return Increment.identity(dt)


# ----------------------------------------------------------------------------
# SE_2(3) maps
# ----------------------------------------------------------------------------
def wedge_se23(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    X = np.zeros((5, 5))
    X[:3, :3] = skew(xi[:3])
    X[:3, 3] = xi[3:6]
    X[:3, 4] = xi[6:9]
    return X


def vee_se23(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.concatenate([unskew(X[:3, :3]), X[:3, 3], X[:3, 4]])


def exp_se23(xi) -> ExtendedPose:
    xi = np.asarray(xi, dtype=float)
    phi = xi[:3]
    ang = math.sqrt(phi @ phi)
    a1, a2, a3, _, _ = _coefficients(ang)
    X = skew(phi)
    X2 = X @ X
    C = _I3 + a1 * X + a2 * X2
    J = _I3 + a2 * X + a3 * X2
    return ExtendedPose(C, J @ xi[3:6], J @ xi[6:9])


def log_se23(T: ExtendedPose) -> np.ndarray:
    phi = so3_log(T.C)
    Jinv = left_jacobian_so3_inv(phi)
    return np.concatenate([phi, Jinv @ T.v, Jinv @ T.r])


def log_se23_batch(C, v, r) -> np.ndarray:
    """Log of a stack of SE_2(3) elements given factored as (N,3,3), (N,3), (N,3)."""
    C = np.asarray(C, dtype=float)
    w = 0.5 * unskew(C - np.swapaxes(C, -1, -2))
    cos_phi = 0.5 * (np.trace(C, axis1=-2, axis2=-1) - 1.0)
    near_pi = math.pi - np.arctan2(np.linalg.norm(w, axis=-1), cos_phi) < 1e-6
    phi = np.empty(C.shape[:-1])
    if np.any(~near_pi):
        phi[~near_pi] = so3_log_batch(C[~near_pi])
    for idx in np.flatnonzero(near_pi):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", BranchAmbiguityWarning)
            phi[idx] = so3_log(C[idx])
    Jinv = left_jacobian_so3_inv(phi)
    nu = np.einsum("...ij,...j->...i", Jinv, v)
    rho = np.einsum("...ij,...j->...i", Jinv, r)
    return np.concatenate([phi, nu, rho], axis=-1)


def adjoint_se23(T: ExtendedPose) -> np.ndarray:
    C = T.C
    A = np.zeros((9, 9))
    A[0:3, 0:3] = C
    A[3:6, 3:6] = C
    A[6:9, 6:9] = C
    A[3:6, 0:3] = skew(T.v) @ C
    A[6:9, 0:3] = skew(T.r) @ C
    return A


def adjoint_de23(U) -> np.ndarray:
    """Adjoint of a DE_2(3) element acting on SE_2(3) tangent vectors.

    Satisfies Exp(Ad(U) xi) = U Exp(xi) U^{-1}.
    """
    C = U.C
    dt = getattr(U, "dt", 0.0)
    A = np.zeros((9, 9))
    A[0:3, 0:3] = C
    A[3:6, 3:6] = C
    A[6:9, 6:9] = C
    A[3:6, 0:3] = skew(U.v) @ C
    A[6:9, 0:3] = -skew(dt * U.v - U.r) @ C
    A[6:9, 3:6] = -dt * C
    return A


def odot(p) -> np.ndarray:
    """5x9 matrix with p^odot xi = xi^ p."""
    p = np.asarray(p, dtype=float)
    out = np.zeros((5, 9))
    out[:3, 0:3] = -skew(p[:3])
    out[:3, 3:6] = p[3] * _I3
    out[:3, 6:9] = p[4] * _I3
    return out


def _q_matrix(phi, rho, coeffs):
    """Coupling block of the SE(3)-style left Jacobian."""
    _, _, a3, a4, a5 = coeffs
    P = skew(phi)
    R = skew(rho)
    PR = P @ R
    RP = R @ P
    PRP = PR @ P
    PP = P @ P
    return (
        0.5 * R
        + a3 * (PR + RP + PRP)
        + a4 * (PP @ R + RP @ P - 3.0 * PRP)
        + a5 * (PRP @ P + PP @ RP)
    )


def left_jacobian_se23(xi) -> np.ndarray:
    """Left Jacobian of SE_2(3): Exp(xi + d) ~= Exp(J d) Exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    phi = xi[:3]
    ang = math.sqrt(phi @ phi)
    coeffs = _coefficients(ang)
    X = skew(phi)
    J = _I3 + coeffs[1] * X + coeffs[2] * (X @ X)
    out = np.zeros((9, 9))
    out[0:3, 0:3] = J
    out[3:6, 3:6] = J
    out[6:9, 6:9] = J
    out[3:6, 0:3] = _q_matrix(phi, xi[3:6], coeffs)
    out[6:9, 0:3] = _q_matrix(phi, xi[6:9], coeffs)
    return out


def ad_se23(xi) -> np.ndarray:
    """Small adjoint (matrix of the Lie bracket) of se_2(3)."""
    xi = np.asarray(xi, dtype=float)
    out = np.zeros((9, 9))
    P = skew(xi[:3])
    out[0:3, 0:3] = P
    out[3:6, 3:6] = P
    out[6:9, 6:9] = P
    out[3:6, 0:3] = skew(xi[3:6])
    out[6:9, 0:3] = skew(xi[6:9])
    return out


# ----------------------------------------------------------------------------
# stacked variants used when preparing whole trajectories
# ----------------------------------------------------------------------------
def _bcoef(a):
    return np.asarray(a, dtype=float)[..., None, None]


def left_jacobian_se23_batch(xi) -> np.ndarray:
    """left_jacobian_se23 applied to a stack of shape (N, 9)."""
    xi = np.asarray(xi, dtype=float)
    phi = xi[:, :3]
    ang = np.linalg.norm(phi, axis=-1)
    _, a2, a3, a4, a5 = (_bcoef(c) for c in _coefficients(ang))
    P = skew(phi)
    PP = P @ P
    J = _I3 + a2 * P + a3 * PP

    def q(rho):
        R = skew(rho)
        PR, RP = P @ R, R @ P
        PRP = PR @ P
        return 0.5 * R + a3 * (PR + RP + PRP) + a4 * (PP @ R + RP @ P - 3.0 * PRP) + a5 * (PRP @ P + PP @ RP)

    out = np.zeros(xi.shape[:-1] + (9, 9))
    out[..., 0:3, 0:3] = J
    out[..., 3:6, 3:6] = J
    out[..., 6:9, 6:9] = J
    out[..., 3:6, 0:3] = q(xi[:, 3:6])
    out[..., 6:9, 0:3] = q(xi[:, 6:9])
    return out


def adjoint_de23_batch(C, v, r, dt) -> np.ndarray:
    """adjoint_de23 for stacks of factored elements (C: (N,3,3), v, r: (N,3))."""
    C = np.asarray(C, dtype=float)
    dt = np.broadcast_to(np.asarray(dt, dtype=float), C.shape[:-2])
    out = np.zeros(C.shape[:-2] + (9, 9))
    out[..., 0:3, 0:3] = C
    out[..., 3:6, 3:6] = C
    out[..., 6:9, 6:9] = C
    out[..., 3:6, 0:3] = skew(v) @ C
    out[..., 6:9, 0:3] = -skew(dt[..., None] * v - r) @ C
    out[..., 6:9, 3:6] = -dt[..., None, None] * C
    return out
