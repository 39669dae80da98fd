"""Per-joint PID control law with integral clamping."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, NumericError

INTEGRAL_CLAMP = 10.0  # rad*s

KP_BOUNDS = (0.1, 500.0)
KI_BOUNDS = (0.0, 1.0)
KD_BOUNDS = (0.1, 500.0)


@dataclass(frozen=True, eq=False)
class PIDGains:
    kp: np.ndarray
    ki: np.ndarray
    kd: np.ndarray

    def __post_init__(self):
        arrays = [np.array(a, dtype=float).reshape(-1) for a in (self.kp, self.ki, self.kd)]
        if len({a.size for a in arrays}) != 1:
            raise DataError("kp, ki, kd must have equal length")
        for name, a in zip(("kp", "ki", "kd"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def n_joints(self) -> int:
        return self.kp.size

    def __eq__(self, other):
        if not isinstance(other, PIDGains):
            return NotImplemented
        return (np.array_equal(self.kp, other.kp) and np.array_equal(self.ki, other.ki)
                and np.array_equal(self.kd, other.kd))

    def within_bounds(self) -> bool:
        return bool(np.all((self.kp >= KP_BOUNDS[0]) & (self.kp <= KP_BOUNDS[1]))
                    and np.all((self.ki >= KI_BOUNDS[0]) & (self.ki <= KI_BOUNDS[1]))
                    and np.all((self.kd >= KD_BOUNDS[0]) & (self.kd <= KD_BOUNDS[1])))

    def scaled(self, factor: float) -> "PIDGains":
        return PIDGains(self.kp * factor, self.ki * factor, self.kd * factor)

    def to_dict(self) -> dict:
        return {"kp": self.kp.tolist(), "ki": self.ki.tolist(), "kd": self.kd.tolist()}

    @classmethod
    def from_dict(cls, doc: dict) -> "PIDGains":
        return cls(doc["kp"], doc["ki"], doc["kd"])

    @classmethod
    def uniform(cls, n_joints: int, kp: float, ki: float, kd: float) -> "PIDGains":
        return cls(np.full(n_joints, kp), np.full(n_joints, ki), np.full(n_joints, kd))


@dataclass
class PIDState:
    integral: np.ndarray
    prev_error: np.ndarray
    initialized: bool = False

    @classmethod
    def fresh(cls, n_joints: int) -> "PIDState":
        return cls(np.zeros(n_joints), np.zeros(n_joints), False)


def pid_step(gains: PIDGains, state: PIDState, error, dt: float,
             integral_clamp: float = INTEGRAL_CLAMP):
    """One control update.

    The integral uses the trapezoid rule (on the first call the previous
    sample is taken equal to the current one) and is clamped to
    ``+-integral_clamp``. The derivative is a backward difference of the
    error and is zero on the first call.

    Returns
    -------
    command : ndarray
        Torque command per joint, before any actuator limit.
    state : PIDState
        Updated controller state (the input state is not modified).
    """
    error = np.asarray(error, dtype=float)
    if error.shape != gains.kp.shape:
        raise ValueError(f"error has shape {error.shape}, gains have {gains.kp.shape}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not np.all(np.isfinite(error)):
        raise NumericError("non-finite tracking error")
    prev = state.prev_error if state.initialized else error
    integral = np.clip(state.integral + 0.5 * (error + prev) * dt,
                       -integral_clamp, integral_clamp)
    derivative = (error - prev) / dt
    command = gains.kp * error + gains.ki * integral + gains.kd * derivative
    return command, PIDState(integral, error.copy(), True)


def reset(state: PIDState) -> PIDState:
    return PIDState(np.zeros_like(state.integral), np.zeros_like(state.prev_error), False)
