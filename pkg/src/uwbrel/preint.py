"""Relative motion increments (RMIs) and the asynchronous-input process model.

A neighbour accumulates ``dT = U_l U_{l+1} ... U_{m-1}`` from its own IMU and
ships it, with the covariance of its right perturbation, whenever it gets to
transmit.  Robot 0 meanwhile keeps an *intermediate* state
``Tc = U0^{-1} ... T`` whose time slot carries a negative debt; applying the
RMI settles the debt and gives back a proper extended pose.

Wire format (little endian)::

    header   <IId     window start, window end, dt [s]          16 bytes
    payload  <55f     quaternion (x, y, z, w), v (3), r (3),
                      upper triangle of the 9x9 covariance (45)  220 bytes

The 236-byte frame fits in a 256-byte budget.
"""

from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .lie import BranchAmbiguityWarning, ExtendedPose, Increment, adjoint_de23, adjoint_se23, so3_log
from .motion import ImuNoiseModel, ImuSample, build_increment, increment_jacobian

HEADER = struct.Struct("<IId")
PAYLOAD = struct.Struct("<55f")
FRAME_BUDGET = 256
PSD_TOLERANCE = 1e-6  # relative to the largest eigenvalue
_TRIU = np.triu_indices(9)
_TRIL = (_TRIU[1], _TRIU[0])


class WindowMismatchError(ValueError):
    """An RMI does not span the steps since the state was last valid."""


@dataclass(frozen=True, eq=False)
class Rmi:
    increment: Increment
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))
    window: tuple = (0, 0)

    def __post_init__(self):
        if self.window[1] < self.window[0]:
            raise ValueError("RMI window must be non-decreasing")

    @staticmethod
    def empty(start: int = 0) -> "Rmi":
        return Rmi(Increment.identity(0.0), np.zeros((9, 9)), (start, start))

    @property
    def n_steps(self) -> int:
        return self.window[1] - self.window[0]


def rmi_update_with(rmi: Rmi, U: Increment, LQLt: np.ndarray) -> Rmi:
    """Append one increment whose (right) noise covariance is ``LQLt``."""
    A = adjoint_de23(U.inverse())
    cov = A @ rmi.covariance @ A.T + LQLt
    return Rmi(rmi.increment @ U, 0.5 * (cov + cov.T), (rmi.window[0], rmi.window[1] + 1))


def rmi_update(rmi: Rmi, u: ImuSample, noise: ImuNoiseModel) -> Rmi:
    L = increment_jacobian(u)
    return rmi_update_with(rmi, build_increment(u), L @ noise.covariance() @ L.T)


def rmi_concatenate(first: Rmi, second: Rmi) -> Rmi:
    if first.window[1] != second.window[0]:
        raise WindowMismatchError("RMI windows are not contiguous")
    A = adjoint_de23(second.increment.inverse())
    cov = A @ first.covariance @ A.T + second.covariance
    return Rmi(
        first.increment @ second.increment,
        0.5 * (cov + cov.T),
        (first.window[0], second.window[1]),
    )


def propagate_without_neighbour(state, U0: Increment) -> Increment:
    """Tc <- U0^{-1} state.  The Jacobian of this map is Ad(U0^{-1})."""
    out = U0.inverse() @ state
    if not isinstance(out, Increment):
        out = Increment.from_pose(out)
    return out


def close_intermediate(state: Increment, rmi: Rmi, tol: float = 1e-9) -> ExtendedPose:
    """Settle an intermediate state with the matching neighbour RMI."""
    out = state @ rmi.increment
    if abs(out.delta_t) > tol:
        raise WindowMismatchError(
            f"time slot {out.delta_t:.3e} s left after applying the RMI"
        )
    return ExtendedPose(out.C, out.v, out.r)


def apply_neighbour_rmi(state, U0: Increment, rmi: Rmi, tol: float = 1e-9):
    """T <- U0^{-1} Tc dT.

    Returns the new pose and the covariance to add to its block,
    ``Ad(T) Sigma_w Ad(T)^T``.
    """
    T = close_intermediate(propagate_without_neighbour(state, U0), rmi, tol)
    A = adjoint_se23(T)
    return T, A @ rmi.covariance @ A.T


# ----------------------------------------------------------------------------
# wire format
# ----------------------------------------------------------------------------
def serialize_rmi(rmi: Rmi, max_passes: int = 8) -> bytes:
    """Encode an RMI into a frame that is a fixed point of decode/encode.

    Decoding renormalises the float32 quaternion and floors covariance
    eigenvalues, which can move the last bit of a value.  Re-encoding the
    decoded RMI until the bytes stop changing makes the round trip exact.
    """
    return _canonical_frame(rmi, max_passes)[0]


def transmit_rmi(rmi: Rmi) -> Rmi:
    """The RMI a receiver decodes from ``serialize_rmi(rmi)``."""
    return _canonical_frame(rmi)[1]


def _canonical_frame(rmi: Rmi, max_passes: int = 8):
    data = _encode(rmi)
    for _ in range(max_passes):
        decoded = deserialize_rmi(data)
        again = _encode(decoded)
        if again == data:
            break
        data = again
    else:
        decoded = deserialize_rmi(data)
    return data, decoded


def _encode(rmi: Rmi) -> bytes:
    inc = rmi.increment
    with warnings.catch_warnings():
        # at an angle of pi both axis signs give the same quaternion rotation
        warnings.simplefilter("ignore", BranchAmbiguityWarning)
        phi = so3_log(inc.C)
    half = 0.5 * math.sqrt(phi @ phi)
    xyz = (math.sin(half) / (2.0 * half) if half > 1e-8 else 0.5) * phi
    values = np.concatenate([xyz, [math.cos(half)], inc.v, inc.r, rmi.covariance[_TRIU]])
    return HEADER.pack(int(rmi.window[0]), int(rmi.window[1]), float(inc.dt)) + values.astype("<f4").tobytes()


def deserialize_rmi(data: bytes) -> Rmi:
    if len(data) != HEADER.size + PAYLOAD.size:
        raise ValueError(
            f"RMI frame has {len(data)} bytes, expected {HEADER.size + PAYLOAD.size}"
        )
    start, end, dt = HEADER.unpack_from(data, 0)
    vals = np.frombuffer(data, dtype="<f4", offset=HEADER.size).astype(np.float64)
    C = Rotation.from_quat(vals[0:4]).as_matrix()
    cov = np.empty((9, 9))
    cov[_TRIU] = vals[10:]
    cov[_TRIL] = vals[10:]
    # negative eigenvalues within float32 resolution are storage noise;
    # clipping them would make decode/encode oscillate
    w = np.linalg.eigvalsh(cov)
    if w[0] < -PSD_TOLERANCE * max(w[-1], 0.0):
        w, V = np.linalg.eigh(cov)
        cov = (V * np.clip(w, 0.0, None)) @ V.T
        cov = 0.5 * (cov + cov.T)
    return Rmi(Increment(C, vals[4:7], vals[7:10], dt), cov, (start, end))
