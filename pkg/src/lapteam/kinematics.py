"""Rigid kinematics of trocar-pivoted laparoscopic instruments.

An instrument is a rigid rod passing through a fixed pivot (the trocar
incision).  Its configuration has four independent degrees of freedom:
pan (pivoted left/right), tilt (pivoted up/down), spin (rotation about the
shaft axis) and insertion depth along the shaft.  Everything here is pure
value-level math; callers own their state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

# Discrete action ids, fixed ordering.  Ids 0..7 move one DOF by one step
# (1 degree or 1 mm), id 8 is a no-op.
ACTION_PAN_NEG = 0
ACTION_PAN_POS = 1
ACTION_TILT_NEG = 2
ACTION_TILT_POS = 3
ACTION_SPIN_NEG = 4
ACTION_SPIN_POS = 5
ACTION_INSERT_NEG = 6
ACTION_INSERT_POS = 7
ACTION_NOOP = 8
N_ACTIONS = 9

ACTION_NAMES = (
    "pan-", "pan+", "tilt-", "tilt+", "spin-", "spin+",
    "insert-", "insert+", "noop",
)

# Per-tick step size of one discrete action: 1 degree per rotation DOF,
# 1 mm of insertion.  A saturated continuous axis matches this.
DEFAULT_STEP_SCALE = (1.0, 1.0, 1.0, 1.0)


class InvalidActionError(ValueError):
    """Raised for a discrete action id outside 0..8."""


@dataclass(frozen=True)
class InstrumentPose:
    """Trocar-relative configuration of one instrument."""

    pan_deg: float = 0.0
    tilt_deg: float = 0.0
    spin_deg: float = 0.0
    insertion_mm: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.pan_deg, self.tilt_deg, self.spin_deg, self.insertion_mm],
            dtype=np.float64,
        )

    @staticmethod
    def from_array(values) -> "InstrumentPose":
        pan, tilt, spin, ins = (float(v) for v in values)
        return InstrumentPose(pan, tilt, spin, ins)


@dataclass(frozen=True)
class DofLimits:
    """Closed intervals per DOF (degrees, degrees, degrees, millimeters)."""

    pan: tuple[float, float] = (-60.0, 60.0)
    tilt: tuple[float, float] = (-60.0, 60.0)
    spin: tuple[float, float] = (-180.0, 180.0)
    insertion: tuple[float, float] = (0.0, 250.0)

    def __post_init__(self):
        for lo, hi in (self.pan, self.tilt, self.spin, self.insertion):
            if not lo <= hi:
                raise ValueError(f"lower limit {lo} exceeds upper limit {hi}")
        if self.insertion[0] < 0.0:
            raise ValueError("insertion limits must be non-negative")

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lows = np.array(
            [self.pan[0], self.tilt[0], self.spin[0], self.insertion[0]])
        highs = np.array(
            [self.pan[1], self.tilt[1], self.spin[1], self.insertion[1]])
        return lows, highs

    def clamp(self, pose: InstrumentPose) -> InstrumentPose:
        lo, hi = self.as_arrays()
        return InstrumentPose.from_array(np.clip(pose.as_array(), lo, hi))

    def contains(self, pose: InstrumentPose) -> bool:
        lo, hi = self.as_arrays()
        v = pose.as_array()
        return bool(np.all(v >= lo) and np.all(v <= hi))


@dataclass(frozen=True)
class TrocarFrame:
    """Fixed pivot position and rest orientation of one trocar port.

    Columns of ``rest_orientation`` are the trocar axes in world
    coordinates: x = pan-horizontal, y = tilt-vertical, z = shaft
    (insertion) direction at zero pan/tilt.
    """

    pivot_mm: np.ndarray
    rest_orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pivot_mm",
                           np.asarray(self.pivot_mm, dtype=np.float64))
        object.__setattr__(self, "rest_orientation",
                           np.asarray(self.rest_orientation, dtype=np.float64))
        if self.pivot_mm.shape != (3,):
            raise ValueError("pivot_mm must be a 3-vector")
        if self.rest_orientation.shape != (3, 3):
            raise ValueError("rest_orientation must be 3x3")
        err = np.abs(self.rest_orientation.T @ self.rest_orientation - np.eye(3))
        if err.max() > 1e-9:
            raise ValueError("rest_orientation is not orthonormal")


def frame_aimed_at(pivot_mm, aim_point_mm, up=(0.0, 1.0, 0.0)) -> TrocarFrame:
    """Trocar frame whose rest shaft axis points from pivot to aim point."""
    pivot = np.asarray(pivot_mm, dtype=np.float64)
    shaft = np.asarray(aim_point_mm, dtype=np.float64) - pivot
    norm = np.linalg.norm(shaft)
    if norm < 1e-12:
        raise ValueError("aim point coincides with pivot")
    z = shaft / norm
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        # Shaft parallel to up: pick another reference.
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
        xn = np.linalg.norm(x)
    x /= xn
    y = np.cross(z, x)
    return TrocarFrame(pivot, np.column_stack([x, y, z]))


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]], dtype=np.float64)


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]], dtype=np.float64)


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]], dtype=np.float64)


def tip_transform(frame: TrocarFrame, pose: InstrumentPose) -> tuple[np.ndarray, np.ndarray]:
    """World rotation and tip position (mm) of the instrument.

    Rotation order: pan about the trocar vertical axis, then tilt about the
    rotated horizontal axis, then spin about the shaft axis (intrinsic
    composition).  The tip sits at ``insertion_mm`` along the rotated shaft.
    """
    local = _rot_y(pose.pan_deg) @ _rot_x(pose.tilt_deg) @ _rot_z(pose.spin_deg)
    rotation = frame.rest_orientation @ local
    tip = frame.pivot_mm + rotation @ np.array([0.0, 0.0, pose.insertion_mm])
    return rotation, tip


def tip_position(frame: TrocarFrame, pose: InstrumentPose) -> np.ndarray:
    return tip_transform(frame, pose)[1]


def shaft_segment(frame: TrocarFrame, pose: InstrumentPose) -> tuple[np.ndarray, np.ndarray]:
    """Inserted shaft as a segment from the pivot to the tip."""
    return frame.pivot_mm.copy(), tip_position(frame, pose)


def apply_discrete(pose: InstrumentPose, action_id: int, limits: DofLimits) -> InstrumentPose:
    """Move exactly one DOF by one step (clamped), or no-op for action 8."""
    if not isinstance(action_id, (int, np.integer)) or not 0 <= action_id < N_ACTIONS:
        raise InvalidActionError(f"action id {action_id!r} outside 0..{N_ACTIONS - 1}")
    if action_id == ACTION_NOOP:
        return pose
    dof, direction = divmod(int(action_id), 2)
    delta = np.zeros(4)
    delta[dof] = -1.0 if direction == 0 else 1.0
    lo, hi = limits.as_arrays()
    return InstrumentPose.from_array(np.clip(pose.as_array() + delta, lo, hi))


def apply_continuous(
    pose: InstrumentPose,
    axes,
    scale=DEFAULT_STEP_SCALE,
    limits: DofLimits = DofLimits(),
) -> tuple[InstrumentPose, int]:
    """Displace every DOF by ``axes[k] * scale[k]``, clamped to limits.

    Axis components outside [-1, 1] are clamped rather than rejected (noisy
    gamepads); the number of clamped components is returned so callers can
    keep a warning counter.
    """
    axes = np.asarray(axes, dtype=np.float64)
    if axes.shape != (4,):
        raise ValueError("axes must be a 4-vector")
    clamped = np.clip(axes, -1.0, 1.0)
    n_clamped = int(np.count_nonzero(clamped != axes))
    delta = clamped * np.asarray(scale, dtype=np.float64)
    lo, hi = limits.as_arrays()
    new = InstrumentPose.from_array(np.clip(pose.as_array() + delta, lo, hi))
    return new, n_clamped


def max_tip_step_mm(pose: InstrumentPose, limits: DofLimits) -> float:
    """Upper bound on tip displacement of any single discrete action.

    One degree of rotation at full insertion sweeps an arc shorter than
    ``insertion * radians(1)``; one insertion step moves the tip 1 mm.
    """
    max_ins = min(pose.insertion_mm + 1.0, limits.insertion[1])
    return max(max_ins * math.radians(1.0), 1.0) + 1e-9
