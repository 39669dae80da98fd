"""Analytic multi-joint plant.

Each joint is an independent second-order system driven by a clamped motor
torque, an external disturbance torque, viscous damping, smoothed Coulomb
friction and a sinusoidal gravity-like load::

    I q'' = clamp(u) + d - b q' - tc tanh(q'/eps) - g sin(q)

integrated with semi-implicit Euler.
"""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import DataError, NumericError, SchemaVersionError

FRICTION_EPS = 0.01  # rad/s, tanh smoothing of the Coulomb term
DEFAULT_DT = 0.01
DEFAULT_EPISODE_STEPS = 2000
GRAVITY = 9.81

_VECTOR_FIELDS = (
    "mass_per_link",
    "inertia_per_joint",
    "link_length",
    "com_offset",
    "viscous_damping",
    "coulomb_friction",
    "torque_limit",
    "gravity_gain",
)
_NONNEGATIVE_FIELDS = ("com_offset", "gravity_gain")


@dataclass(frozen=True, eq=False)
class RobotModel:
    """Physical description of an n-joint robot.

    ``inertia_per_joint`` is the effective (reflected) inertia seen by each
    joint actuator; ``gravity_gain`` is the amplitude of the static load
    torque ``g sin(q)``.
    """

    name: str
    n_joints: int
    mass_per_link: np.ndarray
    inertia_per_joint: np.ndarray
    link_length: np.ndarray
    com_offset: np.ndarray
    viscous_damping: np.ndarray
    coulomb_friction: np.ndarray
    torque_limit: np.ndarray
    gravity_gain: np.ndarray

    def __post_init__(self):
        if not 1 <= int(self.n_joints) <= 12:
            raise DataError(f"n_joints must be in [1, 12], got {self.n_joints}")
        object.__setattr__(self, "n_joints", int(self.n_joints))
        for name in _VECTOR_FIELDS:
            arr = np.array(getattr(self, name), dtype=float).reshape(-1)
            if arr.shape != (self.n_joints,):
                raise DataError(f"{name} has length {arr.size}, expected {self.n_joints}")
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
            if name in _NONNEGATIVE_FIELDS:
                if np.any(arr < 0):
                    raise DataError(f"{name} must be non-negative")
            elif np.any(arr <= 0):
                raise DataError(f"{name} must be strictly positive")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __eq__(self, other):
        if not isinstance(other, RobotModel):
            return NotImplemented
        return (self.name == other.name and self.n_joints == other.n_joints
                and all(np.array_equal(getattr(self, f), getattr(other, f))
                        for f in _VECTOR_FIELDS))

    def replace(self, **changes) -> "RobotModel":
        return replace(self, **changes)

    @property
    def total_mass(self) -> float:
        return float(self.mass_per_link.sum())

    def to_dict(self) -> dict:
        doc = {"schema_version": 1, "name": self.name, "n_joints": self.n_joints}
        for f in _VECTOR_FIELDS:
            doc[f] = getattr(self, f).tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RobotModel":
        if doc.get("schema_version") != 1:
            raise SchemaVersionError(
                f"unsupported robot schema_version {doc.get('schema_version')!r}")
        try:
            return cls(name=doc["name"], n_joints=doc["n_joints"],
                       **{f: doc[f] for f in _VECTOR_FIELDS})
        except KeyError as exc:
            raise DataError(f"robot document missing field {exc}") from None


def save_robot(model: RobotModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n")


def load_robot(path) -> RobotModel:
    return RobotModel.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True, eq=False)
class TrajectorySpec:
    """Per-joint sinusoidal reference ``A sin(2 pi f t + phi) + q0``."""

    amplitude: np.ndarray
    frequency: np.ndarray
    phase: np.ndarray
    offset: np.ndarray
    duration_steps: int = DEFAULT_EPISODE_STEPS
    dt: float = DEFAULT_DT

    def __post_init__(self):
        arrays = [np.array(getattr(self, k), dtype=float).reshape(-1)
                  for k in ("amplitude", "frequency", "phase", "offset")]
        if len({a.size for a in arrays}) != 1:
            raise DataError("trajectory vectors must share one length")
        for k, a in zip(("amplitude", "frequency", "phase", "offset"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, k, a)
        if int(self.duration_steps) < 1:
            raise DataError("duration_steps must be >= 1")
        if not self.dt > 0:
            raise DataError("dt must be positive")
        object.__setattr__(self, "duration_steps", int(self.duration_steps))
        object.__setattr__(self, "dt", float(self.dt))

    @property
    def n_joints(self) -> int:
        return self.amplitude.size

    def __eq__(self, other):
        if not isinstance(other, TrajectorySpec):
            return NotImplemented
        return (self.duration_steps == other.duration_steps and self.dt == other.dt
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("amplitude", "frequency", "phase", "offset")))

    def to_dict(self) -> dict:
        return {"amplitude": self.amplitude.tolist(), "frequency": self.frequency.tolist(),
                "phase": self.phase.tolist(), "offset": self.offset.tolist(),
                "duration_steps": self.duration_steps, "dt": self.dt}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrajectorySpec":
        return cls(**doc)


def random_trajectory(n_joints: int, rng: np.random.Generator,
                      duration_steps: int = DEFAULT_EPISODE_STEPS,
                      dt: float = DEFAULT_DT) -> TrajectorySpec:
    """Draw amplitudes in [0.2, 0.8] rad, frequencies in [0.1, 0.5] Hz and
    uniform phases; offsets are zero."""
    amp = rng.uniform(0.2, 0.8, n_joints)
    freq = rng.uniform(0.1, 0.5, n_joints)
    phase = rng.uniform(0.0, 2 * np.pi, n_joints)
    return TrajectorySpec(amp, freq, phase, np.zeros(n_joints), duration_steps, dt)


def make_reference(spec: TrajectorySpec, step: int):
    """Reference position and its analytic derivative at ``t = step * dt``."""
    if not 0 <= step < spec.duration_steps:
        raise IndexError(f"step {step} outside [0, {spec.duration_steps})")
    w = 2 * np.pi * spec.frequency
    arg = w * (step * spec.dt) + spec.phase
    return spec.amplitude * np.sin(arg) + spec.offset, spec.amplitude * w * np.cos(arg)


@dataclass
class PlantState:
    q: np.ndarray
    qd: np.ndarray
    t: float = 0.0

    @classmethod
    def at_rest(cls, n_joints: int) -> "PlantState":
        return cls(np.zeros(n_joints), np.zeros(n_joints), 0.0)


def joint_acceleration(model: RobotModel, q, qd, torque, disturbance_torque):
    u = np.clip(torque, -model.torque_limit, model.torque_limit)
    net = (u + disturbance_torque - model.viscous_damping * qd
           - model.coulomb_friction * np.tanh(qd / FRICTION_EPS)
           - model.gravity_gain * np.sin(q))
    return net / model.inertia_per_joint


def step_plant(model: RobotModel, state: PlantState, torque, disturbance_torque,
               dt: float) -> PlantState:
    """Advance one semi-implicit Euler step; returns a new state."""
    torque = np.asarray(torque, dtype=float)
    disturbance_torque = np.asarray(disturbance_torque, dtype=float)
    if torque.shape != (model.n_joints,):
        raise ValueError(f"torque has shape {torque.shape}, expected ({model.n_joints},)")
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not (np.all(np.isfinite(torque)) and np.all(np.isfinite(disturbance_torque))
            and np.all(np.isfinite(state.q)) and np.all(np.isfinite(state.qd))):
        raise NumericError("non-finite input to step_plant")
    qdd = joint_acceleration(model, state.q, state.qd, torque, disturbance_torque)
    qd = state.qd + qdd * dt
    q = state.q + qd * dt
    return PlantState(q, qd, state.t + dt)


# --- disturbances -----------------------------------------------------------

class DisturbanceKind(str, enum.Enum):
    NONE = "None"
    RANDOM_FORCE = "RandomForce"
    PAYLOAD_VARIATION = "PayloadVariation"
    PARAMETER_UNCERTAINTY = "ParameterUncertainty"
    MIXED = "Mixed"


@dataclass(frozen=True)
class DisturbanceScenario:
    kind: DisturbanceKind = DisturbanceKind.NONE
    force_range: tuple = (50.0, 150.0)  # N, converted to N*m by mean link length
    force_period: int = 50
    payload_range: tuple = (0.5, 2.0)
    mass_inertia_spread: float = 0.20
    friction_spread: float = 0.50

    def __post_init__(self):
        object.__setattr__(self, "kind", DisturbanceKind(self.kind))
        lo, hi = self.force_range
        plo, phi = self.payload_range
        if min(lo, hi, plo, phi, self.mass_inertia_spread, self.friction_spread) < 0:
            raise DataError("disturbance ranges must be non-negative")
        if int(self.force_period) < 1:
            raise DataError("force_period must be >= 1")

    @property
    def name(self) -> str:
        return self.kind.value

    @classmethod
    def named(cls, name: str) -> "DisturbanceScenario":
        return cls(kind=DisturbanceKind(name))


ALL_SCENARIOS = tuple(DisturbanceScenario(kind=k) for k in DisturbanceKind)


def disturbance_key(seed: int, scenario: DisturbanceScenario, episode: int) -> tuple:
    """Entropy tuple identifying one episode's disturbance stream."""
    return (int(seed), list(DisturbanceKind).index(scenario.kind), int(episode))


def _uniform(rng, lo, hi, size=None):
    # zero-width intervals collapse without consuming randomness differently
    return rng.uniform(lo, hi, size) if hi > lo else np.full(size, lo) if size else lo


def _with_payload(model: RobotModel, payload: float) -> RobotModel:
    mass = model.mass_per_link.copy()
    inertia = model.inertia_per_joint.copy()
    mass[-1] += payload
    inertia[-1] += payload * model.link_length[-1] ** 2
    return model.replace(mass_per_link=mass, inertia_per_joint=inertia)


def _with_uncertainty(model: RobotModel, mass_factor, friction_factor) -> RobotModel:
    return model.replace(
        mass_per_link=model.mass_per_link * mass_factor,
        inertia_per_joint=model.inertia_per_joint * mass_factor,
        viscous_damping=model.viscous_damping * friction_factor,
        coulomb_friction=model.coulomb_friction * friction_factor,
    )


def episode_model(scenario: DisturbanceScenario, model: RobotModel, key) -> RobotModel:
    """Model seen for a whole episode (per-episode draws only)."""
    kind = scenario.kind
    if kind in (DisturbanceKind.NONE, DisturbanceKind.RANDOM_FORCE):
        return model
    rng = np.random.default_rng(np.random.SeedSequence(list(key) + [0]))
    n = model.n_joints
    out = model
    if kind in (DisturbanceKind.PARAMETER_UNCERTAINTY, DisturbanceKind.MIXED):
        s, fs = scenario.mass_inertia_spread, scenario.friction_spread
        mass_factor = _uniform(rng, 1 - s, 1 + s, n)
        friction_factor = _uniform(rng, 1 - fs, 1 + fs, n)
        out = _with_uncertainty(out, mass_factor, friction_factor)
    if kind in (DisturbanceKind.PAYLOAD_VARIATION, DisturbanceKind.MIXED):
        out = _with_payload(out, float(_uniform(rng, *scenario.payload_range)))
    return out


def force_torque(scenario: DisturbanceScenario, model: RobotModel, key, period_index: int):
    """External torque held during one force period (RandomForce only)."""
    if scenario.kind is not DisturbanceKind.RANDOM_FORCE:
        return np.zeros(model.n_joints)
    rng = np.random.default_rng(np.random.SeedSequence(list(key) + [1, int(period_index)]))
    magnitude = _uniform(rng, *scenario.force_range, model.n_joints)
    sign = np.where(rng.random(model.n_joints) < 0.5, -1.0, 1.0)
    return sign * magnitude * float(np.mean(model.link_length))


def force_schedule(scenario: DisturbanceScenario, model: RobotModel, key,
                   n_steps: int) -> np.ndarray:
    """Per-period torque table, shape (n_periods, n_joints)."""
    n_periods = -(-n_steps // scenario.force_period)
    if scenario.kind is not DisturbanceKind.RANDOM_FORCE:
        return np.zeros((max(n_periods, 1), model.n_joints))
    return np.array([force_torque(scenario, model, key, k) for k in range(n_periods)])


def apply_disturbance(scenario: DisturbanceScenario, model: RobotModel, key, step: int):
    """Effective model and disturbance torque at ``step``.

    ``key`` comes from :func:`disturbance_key`; the result is a pure function
    of ``(key, step)``.
    """
    eff = episode_model(scenario, model, key)
    torque = force_torque(scenario, model, key, step // scenario.force_period)
    return eff, torque


# --- features ---------------------------------------------------------------

FEATURE_NAMES = (
    "n_dof", "total_mass", "inertia_mean", "inertia_max", "inertia_sum",
    "link_length_mean", "total_reach", "com_offset_mean",
    "viscous_damping_mean", "coulomb_friction_mean",
)


def extract_features(model: RobotModel) -> np.ndarray:
    inertia = model.inertia_per_joint
    return np.array([
        model.n_joints,
        model.mass_per_link.sum(),
        inertia.mean(),
        inertia.max(),
        inertia.sum(),
        model.link_length.mean(),
        model.link_length.sum(),
        model.com_offset.mean(),
        model.viscous_damping.mean(),
        model.coulomb_friction.mean(),
    ], dtype=float)


# --- presets ----------------------------------------------------------------

def chain_inertia(base_inertia, mass, length, normalizer=1.0) -> np.ndarray:
    """``I_i = base_i * (1 + sum_{j>i} m_j L_j^2 / normalizer)``."""
    base = np.broadcast_to(np.asarray(base_inertia, float), np.shape(mass))
    distal = np.cumsum((np.asarray(mass) * np.asarray(length) ** 2)[::-1])[::-1]
    distal = np.append(distal[1:], 0.0)
    return base * (1.0 + distal / normalizer)


def _gravity_gain(mass, length, com, active):
    mass, length, com = map(np.asarray, (mass, length, com))
    distal_mass = np.append(np.cumsum(mass[::-1])[::-1][1:], 0.0)
    return GRAVITY * (mass * com + length * distal_mass) * np.asarray(active, float)


def _toy2() -> RobotModel:
    # heavy proximal link: joint 1 carries most of the static load
    mass = np.array([8.0, 3.0])
    length = np.array([0.6, 0.4])
    com = length / 2
    return RobotModel(
        name="toy2", n_joints=2, mass_per_link=mass,
        inertia_per_joint=chain_inertia([0.6, 0.4], mass, length, normalizer=0.5),
        link_length=length, com_offset=com,
        viscous_damping=np.full(2, 0.1), coulomb_friction=np.full(2, 0.1),
        torque_limit=np.array([150.0, 80.0]),
        gravity_gain=_gravity_gain(mass, length, com, [1, 1]),
    )


def _arm9() -> RobotModel:
    mass = np.array([3.5, 3.5, 3.0, 2.5, 2.0, 1.5, 1.0, 0.5, 0.5])  # 18 kg
    length = np.array([0.15, 0.15, 0.14, 0.12, 0.11, 0.09, 0.065, 0.015, 0.015])
    com = length / 2
    base = np.array([1.2, 1.2, 1.0, 1.0, 0.5, 0.5, 0.4, 0.2, 0.2])
    return RobotModel(
        name="arm9", n_joints=9, mass_per_link=mass,
        inertia_per_joint=chain_inertia(base, mass, length, normalizer=0.5),
        link_length=length, com_offset=com,
        viscous_damping=np.full(9, 0.1), coulomb_friction=np.full(9, 0.1),
        torque_limit=np.array([87.0, 87.0, 87.0, 87.0, 12.0, 12.0, 12.0, 20.0, 20.0]),
        gravity_gain=_gravity_gain(mass, length, com, [0, 1, 0, 1, 0, 1, 0, 0, 0]),
    )


def _quad12() -> RobotModel:
    leg_mass = np.array([2.0, 2.5, 1.75])  # 4 legs -> 25 kg
    leg_len = np.array([0.04, 0.18, 0.18])
    leg_com = leg_len / 2
    # high-reduction calf drive: large reflected inertia, weak torque limit;
    # fast wide trajectories saturate it
    leg_inertia = chain_inertia([0.8, 1.0, 6.0], leg_mass, leg_len, normalizer=0.5)
    leg_gravity = _gravity_gain(leg_mass, leg_len, leg_com, [0, 1, 1]) + np.array([0, 12.0, 0])
    tile = lambda a: np.tile(a, 4)  # noqa: E731
    return RobotModel(
        name="quad12", n_joints=12, mass_per_link=tile(leg_mass),
        inertia_per_joint=tile(leg_inertia), link_length=tile(leg_len),
        com_offset=tile(leg_com), viscous_damping=np.full(12, 0.1),
        coulomb_friction=np.full(12, 0.1),
        torque_limit=tile([20.0, 55.0, 12.0]), gravity_gain=tile(leg_gravity),
    )


_PRESETS = {"toy2": _toy2, "arm9": _arm9, "quad12": _quad12}
PRESET_NAMES = tuple(_PRESETS)


def preset(name: str) -> RobotModel:
    try:
        return _PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown robot preset {name!r}; choose from {PRESET_NAMES}") from None


def resolve_robot(spec: str) -> RobotModel:
    """Preset name or path to a robot JSON document."""
    if spec in _PRESETS:
        return preset(spec)
    return load_robot(spec)
