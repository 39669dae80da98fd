"""Tracking metrics, the controller x scenario x seed matrix, report files
and the ceiling-effect experiment."""
from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .optimizer import hybrid_optimize
from .pid import PIDGains
from .plant import (
    DisturbanceKind, DisturbanceScenario, RobotModel, TrajectorySpec, disturbance_key,
    preset, random_trajectory,
)
from .rladapt import (
    ACTION_DIM, AdaptEnv, PolicyNet, PPOConfig, policy_forward, squash, train_rl,
)

log = logging.getLogger(__name__)

PENALTY_DEG = 180.0
METRICS = ("mae", "rmse", "max_error", "std_dev")
CELL_COLUMNS = ("controller", "scenario", "seed", "episode", "mae_deg", "rmse_deg",
                "max_deg", "std_deg", "reward_sum", "unstable")


# --- metrics (inputs in rad, outputs in degrees) ------------------------------

def _series(error_series) -> np.ndarray:
    e = np.asarray(error_series, dtype=float)
    if e.ndim == 1:
        e = e[:, None]
    if e.ndim != 2 or e.shape[0] == 0 or e.shape[1] == 0:
        raise ValueError(f"error series must be a non-empty T x n matrix, got shape {e.shape}")
    return e


def per_joint_mae(error_series) -> np.ndarray:
    return np.degrees(np.mean(np.abs(_series(error_series)), axis=0))


def mae(error_series) -> float:
    """Mean over joints of the time-averaged absolute error."""
    return float(np.mean(per_joint_mae(error_series)))


def rmse(error_series) -> float:
    """Root mean square of the joint-space error norm."""
    e = _series(error_series)
    return float(np.degrees(np.sqrt(np.mean(np.sum(e * e, axis=1)))))


def max_error(error_series) -> float:
    return float(np.degrees(np.max(np.linalg.norm(_series(error_series), axis=1))))


def std_dev(error_series) -> float:
    """Population standard deviation of the error norm over time."""
    return float(np.degrees(np.std(np.linalg.norm(_series(error_series), axis=1))))


def improvement(baseline: float, adapted: float) -> float:
    """Percent reduction from ``baseline`` to ``adapted``."""
    if baseline == adapted:
        return 0.0
    if baseline == 0:
        return float("nan")
    return float((baseline - adapted) / baseline * 100.0)


# --- episodes -------------------------------------------------------------------

@dataclass(frozen=True)
class Controller:
    """Fixed initial gains plus an optional adaptation policy."""

    name: str
    gains: PIDGains
    policy: PolicyNet | None = None


@dataclass
class EpisodeResult:
    controller_id: str
    scenario: str
    seed: int
    episode: int
    per_joint_mae: np.ndarray
    mae: float
    rmse: float
    max_error: float
    std_dev: float
    reward_sum: float
    unstable: bool = False
    trace: np.ndarray | None = field(default=None, repr=False)  # error norm per step, deg

    def row(self) -> dict:
        return {"controller": self.controller_id, "scenario": self.scenario, "seed": self.seed,
                "episode": self.episode, "mae_deg": self.mae, "rmse_deg": self.rmse,
                "max_deg": self.max_error, "std_deg": self.std_dev,
                "reward_sum": self.reward_sum, "unstable": int(self.unstable)}


def episode_trajectory(n_joints: int, seed: int, episode: int,
                       duration_steps: int = 2000) -> TrajectorySpec:
    return random_trajectory(n_joints, np.random.default_rng(np.random.SeedSequence([seed, episode])),
                             duration_steps)


def run_episode(model: RobotModel, gains: PIDGains, policy: PolicyNet | None = None,
                scenario: DisturbanceScenario | None = None, spec: TrajectorySpec | None = None,
                seed: int = 0, episode: int = 0, controller_id: str = "",
                decision_interval: int = 50, keep_trace: bool = False) -> EpisodeResult:
    """One closed-loop episode; the policy (if any) acts deterministically
    every ``decision_interval`` steps starting from ``gains``.

    With ``spec`` None the reference is drawn from ``(seed, episode)``.
    Unstable episodes get 180 degree penalty metrics and ``unstable=True``.
    """
    scenario = scenario or DisturbanceScenario(DisturbanceKind.NONE)
    spec = spec or episode_trajectory(model.n_joints, seed, episode)
    env = AdaptEnv(model, gains, scenario, 1, seed, spec, spec.duration_steps, decision_interval)
    env.reset_env(0, spec, disturbance_key(seed, scenario, episode))
    errs, reward_sum, unstable = [], 0.0, False
    for _ in range(spec.duration_steps // decision_interval):
        if policy is None:
            action = np.zeros((1, ACTION_DIM))
        else:
            action = squash(policy_forward(policy, env.observe())[0])
        rewards, _, info = env.step(action)
        reward_sum += float(rewards[0])
        errs.append(info["err"][0, :info["completed"][0]])
        if info["unstable"][0]:
            unstable = True
            break
    e = np.concatenate(errs)
    if unstable:
        pj = np.full(model.n_joints, PENALTY_DEG)
        return EpisodeResult(controller_id, scenario.name, seed, episode, pj, PENALTY_DEG,
                             PENALTY_DEG, PENALTY_DEG, 0.0, reward_sum, True,
                             np.degrees(np.linalg.norm(e, axis=1)) if keep_trace else None)
    return EpisodeResult(controller_id, scenario.name, seed, episode, per_joint_mae(e), mae(e),
                         rmse(e), max_error(e), std_dev(e), reward_sum, False,
                         np.degrees(np.linalg.norm(e, axis=1)) if keep_trace else None)


# --- evaluation matrix --------------------------------------------------------------

@dataclass
class EvalReport:
    cells: list
    aggregates: list
    improvements: list
    baseline: str | None = None
    traces: dict = field(default_factory=dict)


def _cell(args):
    model, ctrl, scenario, seed, episode, cid, keep = args
    return run_episode(model, ctrl.gains, ctrl.policy, scenario, None, seed, episode, cid,
                       keep_trace=keep)


def aggregate(cells, controllers, scenarios, include_unstable: bool = True):
    """Mean/std per (controller, scenario) and improvements against the first
    controller."""
    aggs, imps = [], []
    by_key = {}
    for c in cells:
        if include_unstable or not c.unstable:
            by_key.setdefault((c.controller_id, c.scenario), []).append(c)
    for ctrl in controllers:
        for sc in scenarios:
            group = by_key.get((ctrl, sc), [])
            entry = {"controller": ctrl, "scenario": sc, "n": len(group),
                     "n_unstable": sum(c.unstable for c in group)}
            for m in METRICS + ("reward_sum",):
                vals = np.array([getattr(c, m) for c in group], dtype=float)
                entry[f"{m}_mean"] = float(vals.mean()) if vals.size else float("nan")
                entry[f"{m}_std"] = float(vals.std()) if vals.size else float("nan")
            pj = np.array([c.per_joint_mae for c in group], dtype=float)
            entry["per_joint_mae_mean"] = pj.mean(axis=0).tolist() if pj.size else []
            aggs.append(entry)
    table = {(a["controller"], a["scenario"]): a for a in aggs}
    base = controllers[0] if controllers else None
    for ctrl in controllers[1:]:
        for sc in scenarios:
            b, a = table[(base, sc)], table[(ctrl, sc)]
            imp = {"controller": ctrl, "baseline": base, "scenario": sc}
            for m in METRICS:
                imp[f"{m}_pct"] = improvement(b[f"{m}_mean"], a[f"{m}_mean"])
            imp["per_joint_mae_pct"] = [improvement(x, y) for x, y in
                                        zip(b["per_joint_mae_mean"], a["per_joint_mae_mean"])]
            imps.append(imp)
    return aggs, imps


def evaluate_matrix(models, controllers, scenarios, seeds, episodes_per: int = 3,
                    jobs: int = 1, include_unstable: bool = True) -> EvalReport:
    """Every (model, controller, scenario, seed, episode) cell.

    ``controllers[0]`` is the baseline for improvements. Cells are sorted by
    (controller, scenario, seed, episode) in input order, so the report does
    not depend on ``jobs``.
    """
    models = [models] if isinstance(models, RobotModel) else list(models)
    controllers, scenarios, seeds = list(controllers), list(scenarios), list(seeds)
    if not (models and controllers and scenarios and seeds) or episodes_per < 1:
        raise ConfigError("evaluation axes must be non-empty")
    for m in models:
        for c in controllers:
            if c.gains.n_joints != m.n_joints:
                raise ConfigError(f"controller {c.name!r} has {c.gains.n_joints} joints, "
                                  f"robot {m.name!r} has {m.n_joints}")
    multi = len(models) > 1
    ids = [f"{m.name}/{c.name}" if multi else c.name for m in models for c in controllers]
    if len(set(ids)) != len(ids):
        raise ConfigError("controller names must be unique")
    tasks = []
    k = 0
    for m in models:
        for c in controllers:
            for si, sc in enumerate(scenarios):
                for s in seeds:
                    for ep in range(episodes_per):
                        keep = s == seeds[0] and ep == 0
                        tasks.append(((k, si, s, ep), (m, c, sc, s, ep, ids[k], keep)))
            k += 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell, [t[1] for t in tasks], chunksize=max(1, len(tasks) // (4 * jobs))))
    else:
        results = [_cell(t[1]) for t in tasks]
    order = sorted(range(len(tasks)), key=lambda i: tasks[i][0])
    cells = [results[i] for i in order]
    traces = {(c.controller_id, c.scenario): c.trace for c in cells if c.trace is not None}
    for c in cells:
        c.trace = None
    names = [sc.name for sc in scenarios]
    aggs, imps = aggregate(cells, ids, names, include_unstable)
    return EvalReport(cells, aggs, imps, ids[0], traces)


# --- report files ------------------------------------------------------------

def _num(x):
    return repr(float(x))


def _json_safe(obj):
    if isinstance(obj, float):
        return obj if np.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def write_cells(cells, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CELL_COLUMNS)
        for c in cells:
            r = c.row()
            w.writerow([r["controller"], r["scenario"], r["seed"], r["episode"],
                        *(_num(r[k]) for k in ("mae_deg", "rmse_deg", "max_deg", "std_deg",
                                               "reward_sum")), r["unstable"]])


def read_cells(path) -> list:
    """Rows of a cells.csv as dicts with numeric fields converted."""
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
            header = tuple(rows[0]) if rows else None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if header is not None and header != CELL_COLUMNS:
        raise DataError(f"{path}: unexpected columns {header}")
    out = []
    for r in rows:
        d = dict(r)
        d["seed"], d["episode"], d["unstable"] = int(d["seed"]), int(d["episode"]), int(d["unstable"])
        for k in ("mae_deg", "rmse_deg", "max_deg", "std_deg", "reward_sum"):
            d[k] = float(d[k])
        out.append(d)
    return out


def summary_doc(report: EvalReport) -> dict:
    return _json_safe({"schema_version": 1, "kind": "eval_summary", "baseline": report.baseline,
                       "n_cells": len(report.cells), "aggregates": report.aggregates,
                       "improvements": report.improvements})


def write_report(report: EvalReport, out_dir) -> list:
    """cells.csv, summary.json and plotdata/*.csv under ``out_dir``.

    Returns the written paths.
    """
    out = Path(out_dir)
    plot = out / "plotdata"
    try:
        plot.mkdir(parents=True, exist_ok=True)
        paths = [out / "cells.csv", out / "summary.json",
                 plot / "error_vs_time.csv", plot / "per_joint_mae.csv"]
        write_cells(report.cells, paths[0])
        paths[1].write_text(json.dumps(summary_doc(report), indent=2, sort_keys=True) + "\n")
        with paths[2].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("controller", "scenario", "step", "error_norm_deg"))
            for (ctrl, sc), trace in report.traces.items():
                for t, v in enumerate(trace):
                    w.writerow((ctrl, sc, t, _num(v)))
        with paths[3].open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("controller", "scenario", "joint", "mae_deg"))
            for a in report.aggregates:
                for j, v in enumerate(a["per_joint_mae_mean"]):
                    w.writerow((a["controller"], a["scenario"], j + 1, _num(v)))
    except OSError as exc:
        raise DataError(f"cannot write report to {exc.filename or out}: {exc.strerror}") from None
    return paths


def load_summary(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    if doc.get("kind") != "eval_summary" or doc.get("schema_version") != 1:
        raise DataError(f"{path}: not a version-1 eval summary")
    return doc


# --- ceiling experiment ---------------------------------------------------------

def detune(gains: PIDGains, joint: int = 0, factor: float = 0.5) -> PIDGains:
    kp = gains.kp.copy()
    kp[joint] *= factor
    return replace(gains, kp=kp)


def ceiling_experiment(seed: int = 0, cfg: PPOConfig | None = None, model: RobotModel | None = None,
                       eval_episodes: int = 3, jobs: int = 1) -> dict:
    """RL adaptation gain on a detuned vs an optimized starting point.

    Both conditions start from gains tuned by :func:`hybrid_optimize` on a
    seed-specific reference: condition A halves joint 1's Kp, condition B
    keeps the tuned gains. One policy is trained per condition; net MAE
    improvement is measured on the tuned reference and ``eval_episodes - 1``
    fresh references.
    """
    model = model or preset("toy2")
    cfg = replace(cfg or PPOConfig(), seed=seed)
    spec = episode_trajectory(model.n_joints, seed, 0)
    tuned = hybrid_optimize(model, spec, np.random.default_rng(np.random.SeedSequence([seed, 3])))
    specs = [spec] + [episode_trajectory(model.n_joints, seed, k) for k in range(1, eval_episodes)]
    out = {"seed": seed, "robot": model.name, "tuned_cost_deg": tuned.cost_deg, "conditions": {}}
    for name, gains in (("A_detuned", detune(tuned.gains)), ("B_optimized", tuned.gains)):
        policy, rl_log = train_rl(model, gains, None, cfg, spec=None, jobs=jobs)
        base = [run_episode(model, gains, None, None, s, seed, k) for k, s in enumerate(specs)]
        adapt = [run_episode(model, gains, policy, None, s, seed, k) for k, s in enumerate(specs)]
        b_mae = float(np.mean([r.mae for r in base]))
        a_mae = float(np.mean([r.mae for r in adapt]))
        b_pj = np.mean([r.per_joint_mae for r in base], axis=0)
        a_pj = np.mean([r.per_joint_mae for r in adapt], axis=0)
        out["conditions"][name] = {
            "gains": gains.to_dict(),
            "baseline_mae_deg": b_mae,
            "adapted_mae_deg": a_mae,
            "net_improvement_pct": improvement(b_mae, a_mae),
            "per_joint_baseline_mae_deg": b_pj.tolist(),
            "per_joint_adapted_mae_deg": a_pj.tolist(),
            "per_joint_improvement_pct": [improvement(x, y) for x, y in zip(b_pj, a_pj)],
            "final_mean_ep_reward": rl_log[-1]["mean_ep_reward"],
        }
    c = out["conditions"]
    out["gap_pct_points"] = c["A_detuned"]["net_improvement_pct"] - c["B_optimized"]["net_improvement_pct"]
    return _json_safe(out)
