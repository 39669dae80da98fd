"""Physics-based data augmentation.

Base robots are perturbed into virtual variants, each variant's PID gains
are tuned with :func:`metapid.optimizer.hybrid_optimize`, and the resulting
(features, gains, error) records are filtered by tracking quality and
persisted as JSON Lines.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ParseError, SchemaVersionError
from .optimizer import DIVERGENCE_PENALTY, GainBounds, hybrid_optimize, vector_to_gains
from .pid import PIDGains
from .plant import RobotModel, TrajectorySpec, extract_features, random_trajectory

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
DEFAULT_THRESHOLD_DEG = 30.0


@dataclass(frozen=True)
class PerturbationRanges:
    """Sampling intervals. ``mass``, ``length`` and ``inertia`` are
    multiplicative factors; ``friction`` and ``damping`` are absolute values
    (N*m and N*m*s/rad) assigned to every joint."""

    mass: tuple = (0.9, 1.1)
    length: tuple = (0.95, 1.05)
    inertia: tuple = (0.85, 1.15)
    friction: tuple = (0.05, 0.15)
    damping: tuple = (0.05, 0.2)

    def __post_init__(self):
        for name in ("mass", "length", "inertia", "friction", "damping"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise DataError(f"{name} interval is reversed: ({lo}, {hi})")
            if lo <= 0:
                raise DataError(f"{name} interval must be strictly positive")

    @classmethod
    def narrow_inertia(cls) -> "PerturbationRanges":
        """Variant with +-10% inertia."""
        return cls(inertia=(0.9, 1.1))


def _draw(rng, interval):
    lo, hi = interval
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def apply_perturbations(base: RobotModel, factors: dict) -> RobotModel:
    """Rebuild a variant from its recorded factors.

    ``friction``/``damping`` of ``None`` keep the base values.
    """
    n = base.n_joints
    changes = {
        "mass_per_link": base.mass_per_link * factors["mass"],
        "link_length": base.link_length * factors["length"],
        "inertia_per_joint": base.inertia_per_joint * factors["inertia"],
    }
    if factors.get("friction") is not None:
        changes["coulomb_friction"] = np.full(n, factors["friction"])
    if factors.get("damping") is not None:
        changes["viscous_damping"] = np.full(n, factors["damping"])
    return base.replace(**changes)


def perturb_robot(base: RobotModel, ranges: PerturbationRanges, rng):
    """Draw one virtual robot; returns ``(model, factors)``."""
    rng = np.random.default_rng(rng)
    factors = {
        "mass": _draw(rng, ranges.mass),
        "length": _draw(rng, ranges.length),
        "inertia": _draw(rng, ranges.inertia),
        "friction": _draw(rng, ranges.friction),
        "damping": _draw(rng, ranges.damping),
    }
    return apply_perturbations(base, factors), factors


IDENTITY_FACTORS = {"mass": 1.0, "length": 1.0, "inertia": 1.0, "friction": None, "damping": None}


@dataclass(eq=False)
class AugmentedSample:
    base_name: str
    variant_id: int
    features: np.ndarray
    gains: PIDGains
    opt_error_deg: float
    perturbations: dict
    seed: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        if self.features.shape != (10,):
            raise DataError(f"features must have length 10, got {self.features.shape}")
        if not self.opt_error_deg >= 0:
            raise DataError("opt_error_deg must be non-negative")

    def to_dict(self) -> dict:
        return {
            "base_name": self.base_name,
            "variant_id": int(self.variant_id),
            "features": self.features.tolist(),
            "gains": self.gains.to_dict(),
            "opt_error_deg": float(self.opt_error_deg),
            "perturbations": dict(self.perturbations),
            "seed": int(self.seed),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "AugmentedSample":
        return cls(base_name=doc["base_name"], variant_id=int(doc["variant_id"]),
                   features=doc["features"], gains=PIDGains.from_dict(doc["gains"]),
                   opt_error_deg=float(doc["opt_error_deg"]),
                   perturbations=dict(doc["perturbations"]), seed=int(doc["seed"]))

    def __eq__(self, other):
        if not isinstance(other, AugmentedSample):
            return NotImplemented
        return self.to_dict() == other.to_dict()


@dataclass
class Dataset:
    samples: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    @property
    def errors(self) -> np.ndarray:
        return np.array([s.opt_error_deg for s in self.samples], dtype=float)

    def validate(self) -> None:
        keys = [(s.base_name, s.variant_id) for s in self.samples]
        if len(set(keys)) != len(keys):
            raise DataError("duplicate (base_name, variant_id) in dataset")


def sample_seed(seed: int, base_index: int, variant_id: int) -> int:
    return int(np.random.SeedSequence([int(seed), base_index, variant_id]).generate_state(1)[0])


@dataclass(frozen=True)
class _Task:
    base: RobotModel
    variant_id: int
    seed: int
    ranges: PerturbationRanges
    spec: TrajectorySpec | None
    opt_kwargs: dict


def _run_task(task: _Task) -> AugmentedSample:
    rng = np.random.default_rng(task.seed)
    if task.variant_id == 0:
        model, factors = task.base, dict(IDENTITY_FACTORS)
    else:
        model, factors = perturb_robot(task.base, task.ranges, rng)
    spec = task.spec or random_trajectory(model.n_joints, rng)
    try:
        result = hybrid_optimize(model, spec, rng, **task.opt_kwargs)
        gains, cost = result.gains, result.cost_deg
    except Exception as exc:  # recorded, filtered downstream
        log.warning("optimization failed for %s/%d: %s", task.base.name, task.variant_id, exc)
        bounds = GainBounds.default(model.n_joints)
        gains, cost = vector_to_gains((bounds.lower + bounds.upper) / 2), DIVERGENCE_PENALTY
    return AugmentedSample(task.base.name, task.variant_id, extract_features(model),
                           gains, cost, factors, task.seed)


def build_dataset(bases, variants_per_base: int, spec: TrajectorySpec | None = None,
                  seed: int = 0, ranges: PerturbationRanges | None = None,
                  jobs: int = 1, **opt_kwargs) -> Dataset:
    """Optimize every base robot plus ``variants_per_base`` perturbed copies.

    Variant 0 of each base is the unperturbed robot, so the dataset holds
    ``len(bases) * (variants_per_base + 1)`` samples ordered by
    (base index, variant_id). Each sample draws its perturbation, its
    trajectory (when ``spec`` is None) and its optimizer stream from a seed
    derived from ``(seed, base index, variant_id)``, so results do not depend
    on ``jobs``. Extra keyword arguments go to ``hybrid_optimize``.
    """
    if variants_per_base < 0:
        raise DataError("variants_per_base must be >= 0")
    ranges = ranges or PerturbationRanges()
    tasks = []
    for k, base in enumerate(bases):
        if spec is not None and spec.n_joints != base.n_joints:
            raise DataError(f"trajectory has {spec.n_joints} joints, {base.name} has {base.n_joints}")
        for v in range(variants_per_base + 1):
            tasks.append(_Task(base, v, sample_seed(seed, k, v), ranges, spec, opt_kwargs))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            samples = list(pool.map(_run_task, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        samples = [_run_task(t) for t in tasks]
    data = Dataset(samples)
    data.validate()
    return data


def filter_dataset(data: Dataset, threshold_deg: float = DEFAULT_THRESHOLD_DEG) -> Dataset:
    """Keep samples with ``opt_error_deg <= threshold_deg``, in order."""
    kept = [s for s in data.samples if s.opt_error_deg <= threshold_deg]
    if not kept:
        log.warning("quality filter at %.3g deg removed every sample", threshold_deg)
    return Dataset(kept, data.schema_version)


def sample_weights(data: Dataset) -> np.ndarray:
    """``1 / (1 + error)``, rescaled to mean 1."""
    w = 1.0 / (1.0 + data.errors)
    return w / w.mean() if w.size else w


def save_dataset(data: Dataset, path) -> None:
    lines = [json.dumps({"schema_version": data.schema_version, "kind": "dataset"})]
    lines += [json.dumps(s.to_dict()) for s in data.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    with path.open() as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(path, 1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(path, 1, f"bad header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("kind") != "dataset":
        raise ParseError(path, 1, "header is not a dataset header")
    if header.get("schema_version") != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: unsupported dataset schema_version {header.get('schema_version')!r}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            samples.append(AugmentedSample.from_dict(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(path, lineno, exc.msg) from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path, lineno, f"invalid sample: {exc}") from None
    data = Dataset(samples, header["schema_version"])
    data.validate()
    return data
