"""Layout of robot 0's joint navigation state.

The error state is ordered::

    [ c_s0f0 (2) | xi_1 (9), c_f1f0 (2), c_s1f0 (2) | xi_2 ... ]

for a total dimension of 2 + 13 n with n neighbours.  Clock blocks are
``(tau [ns], gamma [ppb])``; pose blocks are left perturbations
``T = Exp(xi) T_hat`` in (attitude, velocity, position) order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .lie import ExtendedPose, Increment


class TransceiverId(NamedTuple):
    robot: int
    slot: int  # 0 = first ("f"), 1 = second ("s")

    def __str__(self) -> str:
        return f"{'fs'[self.slot]}{self.robot}"

    @staticmethod
    def parse(text: str) -> "TransceiverId":
        slot = "fs".index(text[0])
        return TransceiverId(int(text[1:]), slot)


F0 = TransceiverId(0, 0)
S0 = TransceiverId(0, 1)


def all_transceivers(n_robots: int):
    return [TransceiverId(r, s) for r in range(n_robots) for s in (0, 1)]


def state_dim(n: int) -> int:
    return 2 + 13 * n


def pose_index(robot: int) -> int:
    """First index of a neighbour's pose block (robot >= 1)."""
    return 2 + 13 * (robot - 1)


def clock_index(tid: TransceiverId):
    """First index of a transceiver's clock block, None for f0."""
    if tid.robot == 0:
        return None if tid.slot == 0 else 0
    return pose_index(tid.robot) + 9 + 2 * tid.slot


def clock_row(tid: TransceiverId):
    """Row in the (2n+1, 2) clock array ordered s0, f1, s1, f2, s2, ..."""
    if tid.robot == 0:
        return None if tid.slot == 0 else 0
    return 2 * tid.robot - 1 + tid.slot


def clock_rows_order(n: int):
    return [S0] + [TransceiverId(i, s) for i in range(1, n + 1) for s in (0, 1)]


def clock_state_indices(n: int) -> np.ndarray:
    """Indices of all clock entries in the state, in clock-row order."""
    idx = []
    for tid in clock_rows_order(n):
        c = clock_index(tid)
        idx.extend([c, c + 1])
    return np.array(idx)


def is_valid_pose(T) -> bool:
    return isinstance(T, ExtendedPose)


@dataclass
class NavState:
    """Mean and covariance of robot 0's estimate.

    ``poses[i-1]`` holds neighbour i as an :class:`ExtendedPose` when valid or
    as an :class:`Increment` (intermediate state) while its RMI is pending.
    ``clocks`` has one ``(tau, gamma)`` row per transceiver other than f0.
    ``last_valid[i-1]`` is the step index at which neighbour i was last valid.
    """

    poses: list
    clocks: np.ndarray
    P: np.ndarray
    step: int = 0
    last_valid: list = field(default_factory=list)

    def __post_init__(self):
        n = len(self.poses)
        if self.clocks.shape != (2 * n + 1, 2):
            raise ValueError("clock array must have 2n+1 rows")
        if self.P.shape != (state_dim(n), state_dim(n)):
            raise ValueError("covariance dimension must be 2 + 13n")
        if not self.last_valid:
            self.last_valid = [self.step] * n

    @property
    def n(self) -> int:
        return len(self.poses)

    def pose_of(self, robot: int):
        if robot == 0:
            return ExtendedPose.identity()
        return self.poses[robot - 1]

    def clock_of(self, tid: TransceiverId) -> np.ndarray:
        row = clock_row(tid)
        return np.zeros(2) if row is None else self.clocks[row]

    def copy(self) -> "NavState":
        return NavState(
            list(self.poses), self.clocks.copy(), self.P.copy(), self.step, list(self.last_valid)
        )


def as_increment(T) -> Increment:
    return T if isinstance(T, Increment) else Increment.from_pose(T)
