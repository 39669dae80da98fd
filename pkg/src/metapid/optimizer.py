"""Ground-truth PID tuning: trajectory cost, differential evolution,
Nelder-Mead polish and their hybrid composition."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _sim
from .errors import ConfigError
from .pid import KD_BOUNDS, KI_BOUNDS, KP_BOUNDS, PIDGains
from .plant import RobotModel, TrajectorySpec, make_reference

log = logging.getLogger(__name__)

DIVERGENCE_PENALTY = 1e6  # degrees


@dataclass(frozen=True, eq=False)
class GainBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.array(self.lower, dtype=float).reshape(-1)
        hi = np.array(self.upper, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise ConfigError("bound vectors differ in length")
        if np.any(lo > hi):
            raise ConfigError("lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @classmethod
    def default(cls, n_joints: int) -> "GainBounds":
        """Bounds for the flattened ``[Kp_1..n, Kd_1..n, Ki_1..n]`` vector."""
        lo = np.concatenate([np.full(n_joints, KP_BOUNDS[0]), np.full(n_joints, KD_BOUNDS[0]),
                             np.full(n_joints, KI_BOUNDS[0])])
        hi = np.concatenate([np.full(n_joints, KP_BOUNDS[1]), np.full(n_joints, KD_BOUNDS[1]),
                             np.full(n_joints, KI_BOUNDS[1])])
        return cls(lo, hi)

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, doc) -> "GainBounds":
        return cls(doc["lower"], doc["upper"])


def gains_to_vector(gains: PIDGains) -> np.ndarray:
    return np.concatenate([gains.kp, gains.kd, gains.ki])


def vector_to_gains(x) -> PIDGains:
    x = np.asarray(x, dtype=float)
    n = x.size // 3
    return PIDGains(kp=x[:n], ki=x[2 * n:], kd=x[n:2 * n])


@dataclass(frozen=True)
class OptResult:
    gains: PIDGains
    cost_deg: float
    evaluations: int
    stage_costs: tuple  # (de_cost, polished_cost)


def tracking_cost_deg(errors) -> float:
    """``sqrt(mean_t sum_i e_i(t)^2)`` converted to degrees."""
    errors = np.asarray(errors, dtype=float)
    return float(np.degrees(np.sqrt(np.mean(np.sum(errors ** 2, axis=1)))))


def evaluate_gains(model: RobotModel, gains: PIDGains, spec: TrajectorySpec) -> float:
    """RMS joint tracking error (degrees) over one undisturbed episode.

    The loop starts on the reference (position and velocity). Episodes that
    go non-finite or leave +-10 rad cost ``DIVERGENCE_PENALTY``.
    """
    q0, qd0 = make_reference(spec, 0)
    state = _sim.LoopState(q0, qd0)
    T = spec.duration_steps
    done, err, _ = _sim.simulate(model, gains, spec, state, 0, T)
    if done < T:
        return DIVERGENCE_PENALTY
    cost = tracking_cost_deg(err)
    return cost if np.isfinite(cost) else DIVERGENCE_PENALTY


def _reflect(x, lo, hi):
    x = np.where(x < lo, 2 * lo - x, x)
    x = np.where(x > hi, 2 * hi - x, x)
    # overshoot larger than the box width
    return np.clip(x, lo, hi)


def de_search(objective, bounds: GainBounds, pop: int = 8, generations: int = 15,
              F: float = 0.5, CR: float = 0.7, rng=None, map_fn=map, callback=None):
    """DE/rand/1/bin over a box.

    Trials of one generation are all built from the generation's starting
    population, then evaluated (through ``map_fn``, which may be a parallel
    map) and selected against their own parent on strict improvement.
    Trial components outside the box are reflected back in.

    ``callback(generation, best_cost)`` is invoked after the initial
    population (generation 0) and after every generation.

    Returns
    -------
    best : ndarray
    best_cost : float
    """
    if pop < 4:
        raise ConfigError(f"DE needs pop >= 4, got {pop}")
    rng = np.random.default_rng(rng)
    lo, hi = bounds.lower, bounds.upper
    d = lo.size
    P = lo + rng.random((pop, d)) * (hi - lo)
    costs = np.array(list(map_fn(objective, list(P))), dtype=float)
    if callback is not None:
        callback(0, float(costs.min()))
    for g in range(1, generations + 1):
        trials = np.empty_like(P)
        for i in range(pop):
            others = [j for j in range(pop) if j != i]
            r1, r2, r3 = rng.choice(others, size=3, replace=False)
            mutant = P[r1] + F * (P[r2] - P[r3])
            cross = rng.random(d) < CR
            cross[rng.integers(d)] = True
            trials[i] = _reflect(np.where(cross, mutant, P[i]), lo, hi)
        trial_costs = np.array(list(map_fn(objective, list(trials))), dtype=float)
        better = trial_costs < costs
        P[better] = trials[better]
        costs[better] = trial_costs[better]
        if callback is not None:
            callback(g, float(costs.min()))
    best = int(np.argmin(costs))
    return P[best].copy(), float(costs[best])


def nelder_mead(objective, start, iters: int = 20, bounds: GainBounds | None = None,
                alpha=1.0, gamma=2.0, rho=0.5, sigma=0.5):
    """Bounded Nelder-Mead polish from ``start``.

    The initial simplex is ``start`` plus one vertex per dimension displaced
    by 5% of that dimension's bound width (towards the interior when the
    step would leave the box). Every generated vertex is clamped to the box.
    """
    x0 = np.asarray(start, dtype=float)
    d = x0.size
    if bounds is None:
        lo, hi = np.full(d, -np.inf), np.full(d, np.inf)
        steps = np.where(x0 != 0, 0.05 * np.abs(x0), 0.00025)
    else:
        lo, hi = bounds.lower, bounds.upper
        steps = 0.05 * bounds.width
    clamp = lambda x: np.clip(x, lo, hi)  # noqa: E731

    simplex = np.empty((d + 1, d))
    simplex[0] = x0
    for j in range(d):
        v = x0.copy()
        v[j] = x0[j] + steps[j] if x0[j] + steps[j] <= hi[j] else x0[j] - steps[j]
        simplex[j + 1] = clamp(v)
    fvals = np.array([objective(v) for v in simplex], dtype=float)

    for _ in range(iters):
        order = np.argsort(fvals, kind="stable")
        simplex, fvals = simplex[order], fvals[order]
        centroid = simplex[:-1].mean(axis=0)
        # expansion and outside contraction follow the unclamped reflection
        # direction; only evaluated points are clamped
        direction = centroid - simplex[-1]
        xr = clamp(centroid + alpha * direction)
        fr = objective(xr)
        if fr < fvals[0]:
            xe = clamp(centroid + gamma * alpha * direction)
            fe = objective(xe)
            if fe < fr:
                simplex[-1], fvals[-1] = xe, fe
            else:
                simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-2]:
            simplex[-1], fvals[-1] = xr, fr
            continue
        if fr < fvals[-1]:
            xc = clamp(centroid + rho * alpha * direction)
            fc = objective(xc)
            if fc <= fr:
                simplex[-1], fvals[-1] = xc, fc
                continue
        else:
            xc = clamp(centroid + rho * (simplex[-1] - centroid))
            fc = objective(xc)
            if fc < fvals[-1]:
                simplex[-1], fvals[-1] = xc, fc
                continue
        for j in range(1, d + 1):
            simplex[j] = clamp(simplex[0] + sigma * (simplex[j] - simplex[0]))
            fvals[j] = objective(simplex[j])

    best = int(np.argmin(fvals))
    return simplex[best].copy(), float(fvals[best])


class _Counted:
    def __init__(self, fn):
        self.fn = fn
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        return self.fn(x)


class GainObjective:
    """Picklable ``x -> evaluate_gains`` closure for parallel maps."""

    def __init__(self, model: RobotModel, spec: TrajectorySpec):
        self.model = model
        self.spec = spec

    def __call__(self, x) -> float:
        return evaluate_gains(self.model, vector_to_gains(x), self.spec)


def hybrid_optimize(model: RobotModel, spec: TrajectorySpec, rng=None,
                    bounds: GainBounds | None = None, pop: int = 8,
                    generations: int = 15, F: float = 0.5, CR: float = 0.7,
                    polish_iters: int = 20, map_fn=map) -> OptResult:
    """Differential evolution followed by a Nelder-Mead polish from its best
    point."""
    bounds = bounds or GainBounds.default(model.n_joints)
    objective = _Counted(GainObjective(model, spec))

    def progress(g, best):
        log.debug("gen=%d best=%.6g", g, best)

    x_de, de_cost = de_search(objective, bounds, pop, generations, F, CR, rng,
                              map_fn=map_fn, callback=progress)
    evaluations = pop * (generations + 1)
    objective.calls = 0
    x_nm, nm_cost = nelder_mead(objective, x_de, polish_iters, bounds)
    if nm_cost > de_cost:  # cannot happen: x_de is a simplex vertex
        x_nm, nm_cost = x_de, de_cost
    evaluations += objective.calls
    return OptResult(vector_to_gains(x_nm), nm_cost, evaluations, (de_cost, nm_cost))
