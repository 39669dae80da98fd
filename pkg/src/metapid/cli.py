"""Command-line pipeline: augment -> train-meta -> train-rl -> eval -> report.

Every subcommand takes ``--config FILE`` (JSON object with the keys listed
in its defaults), ``--seed`` and ``--out``; explicit flags override the
config file. Exit codes: 0 success, 1 usage or configuration error, 2 data
or IO error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger("metapid")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n\n{self.format_usage()}")


def _ppo_defaults() -> dict:
    from .rladapt import PPOConfig
    return {f.name: f.default for f in fields(PPOConfig) if f.name != "seed"}


def _train_defaults() -> dict:
    from .metanet import TrainConfig
    return {f.name: f.default for f in fields(TrainConfig) if f.name != "seed"}


def _ranges_defaults() -> dict:
    from .augment import PerturbationRanges
    return {k: list(v) for k, v in asdict(PerturbationRanges()).items()}


SCENARIOS = ["None", "RandomForce", "PayloadVariation", "ParameterUncertainty", "Mixed"]

DEFAULTS = {
    "augment": lambda: {"bases": ["toy2"], "variants": 100, "ranges": _ranges_defaults(),
                        "optimizer": {"pop": 8, "generations": 15, "F": 0.5, "CR": 0.7,
                                      "polish_iters": 20}},
    "train-meta": lambda: {"data": None, "threshold_deg": 30.0, "n_joints": None,
                           "train": _train_defaults()},
    "train-rl": lambda: {"robot": "toy2", "meta": None, "gains": None, "scenario": "None",
                         "ppo": _ppo_defaults()},
    "eval": lambda: {"robot": "toy2", "meta": None, "gains": None, "policy": None,
                     "scenarios": list(SCENARIOS), "seeds": list(range(10)), "episodes": 3,
                     "include_unstable": True},
    "ceiling": lambda: {"seeds": [0, 1, 2, 3, 4], "robot": "toy2", "eval_episodes": 3,
                        "ppo": _ppo_defaults()},
    "report": lambda: {"input": None, "format": "json"},
}

# flags that map onto config keys (flag dest -> config key)
FLAG_KEYS = {
    "augment": {"bases": "bases", "variants": "variants"},
    "train-meta": {"data": "data", "threshold": "threshold_deg"},
    "train-rl": {"robot": "robot", "meta": "meta", "gains": "gains", "scenario": "scenario",
                 "timesteps": ("ppo", "total_timesteps")},
    "eval": {"robot": "robot", "meta": "meta", "gains": "gains", "policy": "policy",
             "episodes": "episodes"},
    "ceiling": {"timesteps": ("ppo", "total_timesteps")},
    "report": {"input": "input", "format": "format"},
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="metapid", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--version", action="version", version="%(prog)s 0.1.0")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(sp, out_help):
        sp.add_argument("--config", type=Path, help="JSON config file (keys as in defaults)")
        sp.add_argument("--seed", type=int, default=None, help="global seed (default 0)")
        sp.add_argument("--out", type=Path, required=True, help=out_help)
        sp.add_argument("--jobs", type=int, default=None,
                        help="worker count (default: available CPUs); results do not depend on it")
        sp.add_argument("-v", "--verbose", action="count", default=0, help="more logging on stderr")

    a = sub.add_parser("augment", help="build an augmented gain dataset (JSONL)")
    common(a, "dataset file to write")
    a.add_argument("--bases", type=lambda s: s.split(","), help="comma list of presets or robot JSON paths")
    a.add_argument("--variants", type=int, help="perturbed variants per base robot")

    t = sub.add_parser("train-meta", help="train the gain prediction network")
    common(t, "checkpoint file to write")
    t.add_argument("--data", type=Path, help="dataset written by augment")
    t.add_argument("--threshold", type=float, help="quality filter in degrees")

    r = sub.add_parser("train-rl", help="train the PPO gain-adaptation policy")
    common(r, "output directory")
    r.add_argument("--robot", help="preset name or robot JSON path")
    r.add_argument("--meta", type=Path, help="metanet checkpoint for initial gains")
    r.add_argument("--gains", type=Path, help="JSON gains {kp, ki, kd} (overrides --meta)")
    r.add_argument("--scenario", choices=SCENARIOS)
    r.add_argument("--timesteps", type=int, help="total PPO decision steps")

    e = sub.add_parser("eval", help="evaluate baseline vs adapted controllers")
    common(e, "output directory")
    e.add_argument("--robot")
    e.add_argument("--meta", type=Path)
    e.add_argument("--gains", type=Path)
    e.add_argument("--policy", type=Path, help="policy checkpoint written by train-rl")
    e.add_argument("--episodes", type=int, help="episodes per (controller, scenario, seed)")

    c = sub.add_parser("ceiling", help="detuned vs optimized RL adaptation experiment")
    common(c, "output directory")
    c.add_argument("--timesteps", type=int)

    rp = sub.add_parser("report", help="improvement table from an eval directory")
    common(rp, "report file to write")
    rp.add_argument("--input", type=Path, help="eval output directory")
    rp.add_argument("--format", choices=["json", "csv"])
    return p


# --- config resolution ----------------------------------------------------------

def _merge(base: dict, override: dict, where: str) -> dict:
    out = dict(base)
    for k, v in override.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def resolve_config(command: str, args) -> dict:
    cfg = DEFAULTS[command]()
    cfg["seed"] = 0
    if args.config is not None:
        try:
            doc = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise DataError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        cfg = _merge(cfg, doc, "")
    for dest, key in FLAG_KEYS[command].items():
        v = getattr(args, dest, None)
        if v is None:
            continue
        v = str(v) if isinstance(v, Path) else v
        if isinstance(key, tuple):
            cfg[key[0]][key[1]] = v
        else:
            cfg[key] = v
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["jobs"] = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    if cfg["jobs"] < 1:
        raise ConfigError("--jobs must be >= 1")
    cfg["out"] = str(args.out)
    return cfg


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _resolved_path(out: Path, is_dir: bool) -> Path:
    return out / "resolved_config.json" if is_dir else out.with_name(out.name + ".resolved_config.json")


def _need(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"{what} is required")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _initial_gains(cfg, model):
    from .metanet import load_checkpoint, predict_gains
    from .pid import PIDGains

    if cfg.get("gains"):
        path = _need(cfg["gains"], "gains file")
        try:
            return PIDGains.from_dict(json.loads(path.read_text())), "gains-file"
        except (json.JSONDecodeError, KeyError) as exc:
            raise DataError(f"{path}: invalid gains document ({exc})") from None
    if cfg.get("meta"):
        return predict_gains(load_checkpoint(_need(cfg["meta"], "metanet checkpoint")), model), "metanet"
    raise ConfigError("initial gains need --meta or --gains")


# --- commands -------------------------------------------------------------------

def cmd_augment(cfg):
    from .augment import PerturbationRanges, build_dataset, save_dataset
    from .plant import resolve_robot

    bases = [resolve_robot(b) for b in cfg["bases"]]
    ranges = PerturbationRanges(**{k: tuple(v) for k, v in cfg["ranges"].items()})
    data = build_dataset(bases, int(cfg["variants"]), seed=cfg["seed"], ranges=ranges,
                         jobs=cfg["jobs"], **cfg["optimizer"])
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(data, out)
    log.info("wrote %d samples to %s", len(data), out)
    return _resolved_path(out, False)


def cmd_train_meta(cfg):
    from .augment import Dataset, filter_dataset, load_dataset
    from .metanet import TrainConfig, init_network, save_checkpoint, train

    data = load_dataset(_need(cfg["data"], "dataset"))
    kept = filter_dataset(data, cfg["threshold_deg"])
    if cfg["n_joints"] is not None:
        kept = Dataset([s for s in kept if s.gains.n_joints == cfg["n_joints"]])
    if not kept.samples:
        raise DataError(f"{cfg['data']}: no samples left after filtering")
    n = kept.samples[0].gains.n_joints
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    net, history = train(init_network(n, cfg["seed"]), kept, tcfg)
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(net, out)
    with out.with_name(out.stem + ".history.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("epoch", "train_loss", "val_loss"))
        for h in history:
            w.writerow((h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])))
    log.info("kept %d/%d samples, trained %d epochs", len(kept), len(data), len(history))
    return _resolved_path(out, False)


def cmd_train_rl(cfg):
    from .plant import DisturbanceScenario, resolve_robot
    from .rladapt import PPOConfig, save_policy, train_rl, write_training_log

    model = resolve_robot(cfg["robot"])
    gains, source = _initial_gains(cfg, model)
    gains = _clamped(gains)
    pcfg = PPOConfig(seed=cfg["seed"], **cfg["ppo"])
    policy, rows = train_rl(model, gains, DisturbanceScenario.named(cfg["scenario"]), pcfg,
                            jobs=cfg["jobs"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_policy(policy, out / "policy.json", pcfg)
    write_training_log(rows, out / "training_log.csv")
    _write_json(out / "init_gains.json", {"source": source, **gains.to_dict()})
    return _resolved_path(out, True)


def _clamped(gains):
    from .pid import KD_BOUNDS, KI_BOUNDS, KP_BOUNDS, PIDGains
    return PIDGains(np.clip(gains.kp, *KP_BOUNDS), np.clip(gains.ki, *KI_BOUNDS),
                    np.clip(gains.kd, *KD_BOUNDS))


def cmd_eval(cfg):
    from .evaluation import Controller, evaluate_matrix, write_report
    from .plant import DisturbanceScenario, resolve_robot
    from .rladapt import load_policy

    model = resolve_robot(cfg["robot"])
    gains, source = _initial_gains(cfg, model)
    gains = _clamped(gains)
    controllers = [Controller(source, gains)]
    if cfg["policy"]:
        controllers.append(Controller(f"{source}+rl", gains, load_policy(_need(cfg["policy"], "policy"))))
    scenarios = [DisturbanceScenario.named(s) for s in cfg["scenarios"]]
    report = evaluate_matrix(model, controllers, scenarios, cfg["seeds"], int(cfg["episodes"]),
                             cfg["jobs"], bool(cfg["include_unstable"]))
    out = Path(cfg["out"])
    write_report(report, out)
    log.info("evaluated %d cells into %s", len(report.cells), out)
    return _resolved_path(out, True)


def cmd_ceiling(cfg):
    from .evaluation import ceiling_experiment
    from .plant import resolve_robot
    from .rladapt import PPOConfig

    model = resolve_robot(cfg["robot"])
    runs = [ceiling_experiment(s, PPOConfig(seed=s, **cfg["ppo"]), model, cfg["eval_episodes"],
                               cfg["jobs"]) for s in cfg["seeds"]]
    gaps = [r["gap_pct_points"] for r in runs]
    doc = {"schema_version": 1, "kind": "ceiling", "runs": runs,
           "mean_gap_pct_points": float(np.mean(gaps)),
           "mean_net_improvement_pct": {
               k: float(np.mean([r["conditions"][k]["net_improvement_pct"] for r in runs]))
               for k in ("A_detuned", "B_optimized")}}
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ceiling.json", doc)
    return _resolved_path(out, True)


REPORT_COLUMNS = ("scenario", "baseline", "controller", "baseline_mae_deg", "adapted_mae_deg",
                  "mae_improvement_pct", "rmse_improvement_pct")


def report_rows(eval_dir) -> list:
    """Improvement table recomputed from an eval directory's cells.csv."""
    from .evaluation import improvement, load_summary, read_cells

    eval_dir = Path(eval_dir)
    summary = load_summary(_need(eval_dir / "summary.json", "eval summary"))
    cells = read_cells(_need(eval_dir / "cells.csv", "eval cells"))
    base = summary["baseline"]
    groups = {}
    for c in cells:
        groups.setdefault((c["controller"], c["scenario"]), []).append(c)
    rows = []
    for imp in summary["improvements"]:
        sc, ctrl = imp["scenario"], imp["controller"]
        b, a = groups.get((base, sc), []), groups.get((ctrl, sc), [])
        if not b or not a:
            raise DataError(f"{eval_dir}: cells missing for {ctrl}/{sc}")
        bm = float(np.mean([c["mae_deg"] for c in b]))
        am = float(np.mean([c["mae_deg"] for c in a]))
        br = float(np.mean([c["rmse_deg"] for c in b]))
        ar = float(np.mean([c["rmse_deg"] for c in a]))
        rows.append({"scenario": sc, "baseline": base, "controller": ctrl, "baseline_mae_deg": bm,
                     "adapted_mae_deg": am, "mae_improvement_pct": improvement(bm, am),
                     "rmse_improvement_pct": improvement(br, ar)})
    return rows


def cmd_report(cfg):
    rows = report_rows(_need(cfg["input"], "eval directory"))
    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    if cfg["format"] == "json":
        _write_json(out, {"schema_version": 1, "kind": "report", "rows": rows})
    elif cfg["format"] == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        out.write_text(buf.getvalue())
    else:
        raise ConfigError(f"unknown report format {cfg['format']!r}")
    return _resolved_path(out, False)


COMMANDS = {"augment": cmd_augment, "train-meta": cmd_train_meta, "train-rl": cmd_train_rl,
            "eval": cmd_eval, "ceiling": cmd_ceiling, "report": cmd_report}


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        sys.stderr.write(parser.format_help())
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2) if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args.command, args)
        resolved = COMMANDS[args.command](cfg)
        resolved.parent.mkdir(parents=True, exist_ok=True)
        _write_json(resolved, cfg)
    except (ConfigError, KeyError, TypeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        sys.stderr.write(f"metapid {args.command}: configuration error: {msg}\n")
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        sys.stderr.write(f"metapid {args.command}: {exc}\n")
        return EXIT_DATA
    return EXIT_OK


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
