import math

import numpy as np
import pytest

from safegil.bench import (
    ExpertController,
    MethodSpec,
    RolloutError,
    RolloutResult,
    aggregate,
    dataset_value_histogram,
    eval_starts,
    evaluate,
    plot_svg,
    rollout,
    run_experiment,
    summarize,
    trajectory_cost,
)
from safegil.bench_io import read_report
from safegil.collect import Dataset, DemoRecord
from safegil.envmodels import BUILTIN_ENVS, env_from_dict
from safegil.experts import make_expert


class Const:
    def __init__(self, u):
        self.u = u

    def __call__(self, x):
        return self.u


def fake_result(outcome, cost=1.0, px=0.0):
    states = np.array([[px, 0.0, 0.0], [px, 1.0, 0.0]])
    return RolloutResult(states, np.zeros(1), np.zeros(1, bool), np.array([0.0, 0.1]), outcome, cost, 1.0)


@pytest.fixture(scope="module")
def uni():
    return env_from_dict(BUILTIN_ENVS["unicycle"]())


@pytest.fixture(scope="module")
def taxi():
    return env_from_dict(BUILTIN_ENVS["taxi"]())


def test_expert_rollout_reaches_goal(uni):
    res = rollout(uni, ExpertController(make_expert(uni), seed=0), [-4.0, -4.0, math.pi / 4])
    assert res.outcome == "goal"
    assert res.min_value > 0
    assert np.all(res.times == uni.dt * np.arange(len(res.states)))


def test_straight_into_obstacle_collides(uni):
    res = rollout(uni, Const(0.0), [0.0, -2.0, math.pi / 2])
    assert res.outcome == "collision"
    assert res.min_value <= 0
    assert uni.target(res.states[-1]) <= 0 or res.min_value <= 0


def test_circling_times_out(uni):
    res = rollout(uni, Const(1.0), [-3.5, -4.0, 0.0])  # unit circle clear of everything
    assert res.outcome == "timeout"
    assert len(res.actions) == round(uni.timeout / uni.dt)


def test_taxi_ends_at_runway_end(taxi):
    res = rollout(taxi, Const(0.0), [0.0, 0.0, 0.0])
    assert res.outcome == "goal"
    assert res.states[-1, 1] >= 200
    assert trajectory_cost(taxi, res.states, res.actions) == 0.0


def test_rollout_errors(uni):
    with pytest.raises(ValueError):
        rollout(uni, Const(0.0), [0.0, 1.5, 0.0])
    with pytest.raises(RolloutError):
        rollout(uni, Const(float("nan")), [-3.0, -3.0, 0.0])

    def boom(x):
        raise RuntimeError("policy crashed")

    with pytest.raises(RolloutError):
        rollout(uni, boom, [-3.0, -3.0, 0.0])


def test_failure_rate_is_a_ratio(uni):
    results = [fake_result("collision")] * 12 + [fake_result("goal")] * 88
    assert summarize(uni, results)["failure_rate"] == 0.12


def test_safe_cost_only_over_goal_runs(uni):
    results = [fake_result("goal", 2.0), fake_result("goal", 4.0), fake_result("collision", 100.0),
               fake_result("timeout", 50.0)]
    s = summarize(uni, results)
    assert s["safe_cost"] == 3.0
    assert s["n_goal"] + s["n_failure"] + s["n_timeout"] == s["n_starts"]


def test_centerline_msd_pinned(taxi):
    states = np.column_stack([np.full(20, 2.0), np.linspace(0, 200, 20), np.zeros(20)])
    assert trajectory_cost(taxi, states, np.zeros(19)) == 4.0
    s = summarize(taxi, [fake_result("goal", 4.0, px=2.0)])
    assert s["centerline_msd"] == 4.0 and s["final_abs_px"] == 2.0


def test_evaluate_deterministic(taxi):
    ctrl = ExpertController(make_expert(taxi))
    assert evaluate(taxi, ctrl, 4, seed=3) == evaluate(taxi, ctrl, 4, seed=3)
    with pytest.raises(ValueError):
        eval_starts(taxi, 0, 1)


def test_eval_starts_respect_value_floor(coarse_uni):
    env, vf = coarse_uni
    from safegil.reach import query_value

    for x in eval_starts(env, 20, 0, vf):
        assert query_value(vf, x, 0.0) > 0.2


def test_histogram_examples(coarse_uni):
    env, vf = coarse_uni
    inside = Dataset([DemoRecord(0, 0.1 * i, np.array([0.0, 1.5, 0.3 * i]), 0, 0, 0) for i in range(5)])
    h = dataset_value_histogram(inside, vf)
    assert h["edges"][-1] <= 0 and sum(h["counts"]) == 5
    with pytest.raises(ValueError):
        dataset_value_histogram(Dataset([]), vf)


def rows_for(methods, Ks, seeds=2):
    return [{"method": m, "K": k, "seed": s, "failure_rate": 0.1 * i + 0.01 * k + 0.001 * s, "error": ""}
            for i, m in enumerate(methods) for k in Ks for s in range(seeds)]


def test_aggregate_is_order_invariant():
    rows = rows_for(["bc", "safegil"], [5, 10])
    assert aggregate(rows, "failure_rate") == aggregate(rows[::-1], "failure_rate")


def test_plot_polylines():
    svg = plot_svg(rows_for(["bc", "safegil"], [5, 10, 20, 40]), "failure_rate")
    lines = [l for l in svg.splitlines() if l.startswith("<polyline")]
    assert len(lines) == 2
    assert all(len(l.split('points="')[1].split('"')[0].split()) == 4 for l in lines)
    assert svg == plot_svg(rows_for(["bc", "safegil"], [5, 10, 20, 40]), "failure_rate")


def test_plot_single_point_and_empty():
    svg = plot_svg(rows_for(["bc"], [5], seeds=1), "failure_rate")
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    with pytest.raises(ValueError):
        plot_svg([], "failure_rate")


def test_method_spec_parsing():
    assert MethodSpec.parse("bc+filter").filter
    m = MethodSpec.parse({"name": "sg-0.2", "method": "safegil", "dbar_max": 0.2})
    assert (m.name, m.dbar_max) == ("sg-0.2", 0.2)
    with pytest.raises(ValueError):
        MethodSpec.parse("bc+vision")


def test_small_sweep_is_reproducible(tmp_path):
    spec = {"env": "integrator1d", "methods": ["bc", "safegil", "bc+filter"], "K": [1, 2], "seeds": 2,
            "n_eval": 5, "train": {"hidden": [8], "epochs": 30}, "name": "tiny", "vf": "vf.sgvf"}
    rows = run_experiment(spec, tmp_path / "a", base=tmp_path)
    assert len(rows) == 3 * 2 * 2 and not any(r["error"] for r in rows)
    run_experiment(spec, tmp_path / "b", base=tmp_path)
    a = (tmp_path / "a" / "reports" / "tiny.csv").read_bytes()
    assert a == (tmp_path / "b" / "reports" / "tiny.csv").read_bytes()
    assert len(read_report(tmp_path / "a" / "reports" / "tiny.csv")) == 12
    assert (tmp_path / "a" / "plots" / "tiny_failure_rate.svg").exists()
    assert len(list((tmp_path / "a" / "policies").glob("*.json"))) == 2 * 2 * 2
