import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from metapid.errors import ConfigError
from metapid.evaluation import (
    CELL_COLUMNS, PENALTY_DEG, Controller, EvalReport, aggregate, detune, episode_trajectory,
    evaluate_matrix, improvement, load_summary, mae, max_error, per_joint_mae, read_cells,
    rmse, run_episode, std_dev, write_report,
)
from metapid.optimizer import hybrid_optimize
from metapid.pid import PIDGains
from metapid.plant import ALL_SCENARIOS, DisturbanceKind, DisturbanceScenario, preset
from metapid.rladapt import init_policy

from oracles import metrics_brute_force

series = arrays(np.float64, st.tuples(st.integers(1, 50), st.integers(1, 12)),
                elements=st.floats(-3, 3, allow_nan=False))
GAINS = PIDGains.uniform(2, 60.0, 0.0, 4.0)


def test_metric_examples():
    e = np.radians(np.tile([1.0, 2.0, 3.0], (7, 1)))
    assert mae(e) == pytest.approx(2.0)
    assert mae(np.zeros((4, 2))) == 0.0
    c = np.radians(np.tile([3.0, 4.0], (9, 1)))
    assert rmse(c) == pytest.approx(5.0) and max_error(c) == pytest.approx(5.0)
    assert std_dev(c) == pytest.approx(0.0, abs=1e-12)
    assert std_dev(np.radians([[1.0, 2.0]])) == 0.0


def test_metrics_reject_empty():
    for f in (mae, rmse, max_error, std_dev):
        with pytest.raises(ValueError):
            f(np.zeros((0, 3)))


def test_mae_random_against_double_loop():
    e = np.random.default_rng(0).normal(size=(5, 3))
    assert mae(e) == pytest.approx(metrics_brute_force(e)[0], abs=1e-12)


@given(series)
def test_metrics_match_brute_force(e):
    ref = metrics_brute_force(e)
    got = (mae(e), rmse(e), max_error(e), std_dev(e))
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)


@given(series)
def test_metric_inequalities(e):
    assert mae(e) <= per_joint_mae(e).max() + 1e-12
    assert max_error(e) >= rmse(e) - 1e-9
    assert rmse(e) >= np.degrees(np.linalg.norm(e.mean(axis=0))) / np.sqrt(len(e)) - 1e-9
    assert mae(e) == pytest.approx(per_joint_mae(e).mean())
    assert min(mae(e), rmse(e), max_error(e), std_dev(e)) >= 0


def test_improvement_examples():
    assert improvement(7.51, 6.26) == pytest.approx(16.6, abs=0.05)
    assert improvement(35.90, 29.01) == pytest.approx(19.2, abs=0.05)
    assert improvement(3.0, 3.0) == 0.0
    assert np.isnan(improvement(0.0, 1.0))


def test_run_episode_is_deterministic():
    sc = DisturbanceScenario(DisturbanceKind.MIXED)
    a = run_episode(preset("toy2"), GAINS, None, sc, seed=4, episode=2)
    b = run_episode(preset("toy2"), GAINS, None, sc, seed=4, episode=2)
    assert a.row() == b.row()
    np.testing.assert_array_equal(a.per_joint_mae, b.per_joint_mae)


def test_zero_policy_matches_no_policy():
    policy = init_policy(0, hidden=8)
    for k in policy.params:
        if k.startswith("a_"):
            policy.params[k][...] = 0.0
    sc = DisturbanceScenario(DisturbanceKind.RANDOM_FORCE)
    a = run_episode(preset("toy2"), GAINS, None, sc, seed=1)
    b = run_episode(preset("toy2"), GAINS, policy, sc, seed=1)
    assert a.row() == b.row()


def test_near_optimal_beats_mid_bound():
    model = preset("toy2")
    spec = episode_trajectory(2, 0, 0)
    tuned = hybrid_optimize(model, spec, np.random.default_rng(0)).gains
    mid = PIDGains.uniform(2, 250.05, 0.5, 250.05)
    assert run_episode(model, tuned, spec=spec).mae < run_episode(model, mid, spec=spec).mae


def test_unstable_episode_penalised():
    model = preset("toy2").replace(torque_limit=np.full(2, 1e9), inertia_per_joint=np.full(2, 1e-4))
    r = run_episode(model, PIDGains.uniform(2, 500, 1, 0.1))
    assert r.unstable and r.mae == r.rmse == r.max_error == PENALTY_DEG


def test_matrix_cell_count_and_order():
    ctrls = [Controller("a", GAINS), Controller("b", detune(GAINS))]
    rep = evaluate_matrix(preset("toy2"), ctrls, ALL_SCENARIOS, [0, 1], episodes_per=1)
    assert len(rep.cells) == 20
    keys = [(c.controller_id, c.scenario, c.seed) for c in rep.cells]
    assert keys == [(c, s.name, seed) for c in "ab" for s in ALL_SCENARIOS for seed in (0, 1)]


def test_matrix_validation():
    with pytest.raises(ConfigError):
        evaluate_matrix(preset("toy2"), [Controller("x", PIDGains.uniform(3, 1, 0, 1))],
                        ALL_SCENARIOS[:1], [0])
    with pytest.raises(ConfigError):
        evaluate_matrix(preset("toy2"), [], ALL_SCENARIOS[:1], [0])


def test_self_comparison_and_aggregates():
    ctrls = [Controller("a", GAINS), Controller("a2", GAINS)]
    scen = ALL_SCENARIOS[:2]
    rep = evaluate_matrix(preset("toy2"), ctrls, scen, [0, 3], episodes_per=2)
    for imp in rep.improvements:
        assert all(imp[f"{m}_pct"] == 0.0 for m in ("mae", "rmse", "max_error", "std_dev"))
    for agg in rep.aggregates:
        vals = [c.mae for c in rep.cells if (c.controller_id, c.scenario) == (agg["controller"], agg["scenario"])]
        assert agg["n"] == 4
        assert agg["mae_mean"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)


def test_matrix_jobs_independent(tmp_path):
    ctrls = [Controller("a", GAINS), Controller("b", detune(GAINS))]
    args = (preset("toy2"), ctrls, ALL_SCENARIOS[1:3], [0, 1])
    write_report(evaluate_matrix(*args, episodes_per=1, jobs=1), tmp_path / "j1")
    write_report(evaluate_matrix(*args, episodes_per=1, jobs=2), tmp_path / "j2")
    for name in ("cells.csv", "summary.json", "plotdata/error_vs_time.csv", "plotdata/per_joint_mae.csv"):
        assert (tmp_path / "j1" / name).read_bytes() == (tmp_path / "j2" / name).read_bytes()


def test_report_round_trip(tmp_path):
    ctrls = [Controller("base", GAINS), Controller("det", detune(GAINS))]
    rep = evaluate_matrix(preset("toy2"), ctrls, ALL_SCENARIOS[:2], [0, 1], episodes_per=1)
    write_report(rep, tmp_path)
    rows = read_cells(tmp_path / "cells.csv")
    assert len(rows) == len(rep.cells)
    summary = load_summary(tmp_path / "summary.json")
    for imp in summary["improvements"]:
        b = [r["mae_deg"] for r in rows if (r["controller"], r["scenario"]) == ("base", imp["scenario"])]
        a = [r["mae_deg"] for r in rows if (r["controller"], r["scenario"]) == ("det", imp["scenario"])]
        assert imp["mae_pct"] == pytest.approx(improvement(np.mean(b), np.mean(a)), abs=1e-9)


def test_empty_report(tmp_path):
    write_report(EvalReport([], [], []), tmp_path)
    assert (tmp_path / "cells.csv").read_text() == ",".join(CELL_COLUMNS) + "\n"
    assert json.loads((tmp_path / "summary.json").read_text())["n_cells"] == 0
    assert read_cells(tmp_path / "cells.csv") == []


def test_aggregate_can_exclude_unstable():
    good = run_episode(preset("toy2"), GAINS, controller_id="c")
    bad = run_episode(preset("toy2").replace(torque_limit=np.full(2, 1e9), inertia_per_joint=np.full(2, 1e-4)),
                      PIDGains.uniform(2, 500, 1, 0.1), controller_id="c")
    incl, _ = aggregate([good, bad], ["c"], ["None"], include_unstable=True)
    excl, _ = aggregate([good, bad], ["c"], ["None"], include_unstable=False)
    assert incl[0]["n"] == 2 and incl[0]["n_unstable"] == 1
    assert excl[0]["mae_mean"] == pytest.approx(good.mae)


def test_detune_halves_one_joint():
    g = detune(PIDGains.uniform(2, 100, 0.1, 5))
    assert list(g.kp) == [50.0, 100.0]
