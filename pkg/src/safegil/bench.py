"""Closed-loop rollouts, evaluation metrics and experiment sweeps."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bench_io
from .collect import CollectionPlan, Dataset, collect, sample_valid_start
from .envmodels import BUILTIN_ENVS, Env, env_from_dict, load_env
from .experts import MpcConfig, make_expert
from .policy import MlpPolicy, TrainConfig, train_on_dataset
from .reach import ValueFunction, check_env_match, query_values, solve_env
from .shield import FilterConfig, SafetyFilter

log = logging.getLogger(__name__)

OUTCOMES = ("goal", "collision", "timeout")
START_MIN_VALUE = 0.2


class RolloutError(RuntimeError):
    pass


@dataclass
class RolloutResult:
    states: np.ndarray
    actions: np.ndarray
    engaged: np.ndarray
    times: np.ndarray
    outcome: str
    cost: float
    min_value: float

    @property
    def steps(self) -> int:
        return len(self.actions)


# --- controllers -----------------------------------------------------------------

class PolicyController:
    """A learned policy, optionally behind a safety filter."""

    def __init__(self, policy: MlpPolicy, shield: SafetyFilter | None = None):
        self.policy = policy
        self.shield = shield
        self.engaged = False

    def reset(self, index: int = 0):
        self.engaged = False
        if self.shield is not None:
            self.shield.reset()

    def __call__(self, x) -> float:
        u = self.policy(x)
        if self.shield is None:
            return u
        u = self.shield(x, u)
        self.engaged = self.shield.engaged
        return u


class ExpertController:
    """Closed-loop expert; start ``index`` keys its random stream."""

    def __init__(self, expert, seed: int = 0):
        self.expert = expert
        self.seed = seed
        self.engaged = False
        self.rng = np.random.default_rng([seed, 0])

    def reset(self, index: int = 0):
        self.rng = np.random.default_rng([self.seed, index, 1])

    def __call__(self, x) -> float:
        return float(self.expert(x, self.rng))


# --- rollouts and metrics ----------------------------------------------------------

def trajectory_cost(env: Env, states, actions) -> float:
    """Expert objective for the unicycle, mean squared offset for the runway."""
    if env.model.name == "unicycle":
        from .experts import mpc_cost

        spec = {k: v for k, v in env.expert.items() if k != "kind"}
        return mpc_cost(env, states, actions, MpcConfig(**spec))
    if env.model.name == "taxi":
        return float(np.mean(np.asarray(states)[:, 0] ** 2))
    return 0.0


def rollout(env: Env, controller, x0, disturbance=None, max_time: float | None = None,
            index: int = 0) -> RolloutResult:
    """Simulate at the control rate until goal, failure or timeout.

    ``disturbance(x, u) -> d`` optionally adds an input disturbance.
    """
    x = np.asarray(x0, dtype=float)
    low = float(env.target(x))
    if low <= 0:
        raise ValueError("start state is inside the failure set")
    if hasattr(controller, "reset"):
        controller.reset(index)
    steps = int(round((env.timeout if max_time is None else max_time) / env.dt))
    states, actions, engaged = [x], [], []
    outcome = "timeout"
    for _ in range(steps):
        try:
            u = float(controller(x))
        except Exception as exc:
            raise RolloutError(f"controller failed at x={x.tolist()}: {exc}") from exc
        if not math.isfinite(u):
            raise RolloutError(f"controller returned {u} at x={x.tolist()}")
        d = 0.0 if disturbance is None else float(disturbance(x, u))
        x, step_low = env.advance(x, u, d)
        actions.append(u)
        engaged.append(bool(getattr(controller, "engaged", False)))
        states.append(x)
        low = min(low, step_low)
        if step_low <= 0:
            outcome = "collision"
            break
        if env.at_goal(x):
            outcome = "goal"
            break
    states = np.array(states)
    actions = np.array(actions)
    return RolloutResult(states, actions, np.array(engaged, dtype=bool), env.dt * np.arange(len(states)),
                         outcome, trajectory_cost(env, states, actions), low)


def eval_starts(env: Env, n_starts: int, seed: int, vf: ValueFunction | None = None,
                min_value: float = START_MIN_VALUE) -> np.ndarray:
    """Deterministic evaluation starts, rejected against the failure set and the BRT."""
    if n_starts < 1:
        raise ValueError("n_starts must be >= 1")
    rng = np.random.default_rng([seed, 0x5EED])
    return np.array([sample_valid_start(env, rng, vf, min_value if vf is not None else None)
                     for _ in range(n_starts)])


def summarize(env: Env, results: list[RolloutResult]) -> dict:
    n = len(results)
    by = {o: [r for r in results if r.outcome == o] for o in OUTCOMES}
    goal = by["goal"]
    safe = [r for r in results if r.outcome != "collision"]
    nan = float("nan")
    out = {
        "n_starts": n,
        "n_goal": len(goal),
        "n_failure": len(by["collision"]),
        "n_timeout": len(by["timeout"]),
        "failure_rate": len(by["collision"]) / n,
        "safe_cost": float(np.mean([r.cost for r in goal])) if goal else nan,
        "centerline_msd": nan,
        "final_abs_px": nan,
        "filter_engagements": int(sum(int(r.engaged.sum()) for r in results)),
    }
    if env.model.name == "taxi":
        out["centerline_msd"] = out["safe_cost"]
        out["final_abs_px"] = float(np.mean([abs(r.states[-1, 0]) for r in safe])) if safe else nan
    return out


def evaluate(env: Env, controller, n_starts: int, seed: int, vf: ValueFunction | None = None,
             min_value: float = START_MIN_VALUE) -> dict:
    """Roll out from ``n_starts`` sampled starts and aggregate metrics."""
    starts = eval_starts(env, n_starts, seed, vf, min_value)
    results = [rollout(env, controller, x0, index=i) for i, x0 in enumerate(starts)]
    out = summarize(env, results)
    out["start_min_value"] = min_value if vf is not None else None
    return out


def dataset_value_histogram(ds: Dataset, vf: ValueFunction, bins: int = 20, dbar: float | None = None) -> dict:
    """Distribution of ``V(x; dbar_max)`` over the states of a dataset."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    dbar = vf.dbar_max if dbar is None else dbar
    v = query_values(vf, ds.states, dbar)
    counts, edges = np.histogram(v, bins=bins)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "p10": float(np.percentile(v, 10)),
            "counts": counts.tolist(), "edges": edges.tolist()}


# --- experiment sweeps -----------------------------------------------------------------

@dataclass
class MethodSpec:
    name: str
    method: str
    filter: bool = False
    dbar_max: float | None = None
    sigma: float | None = None

    @classmethod
    def parse(cls, item) -> "MethodSpec":
        if isinstance(item, str):
            base, _, suffix = item.partition("+")
            if suffix not in ("", "filter"):
                raise ValueError(f"unknown method modifier in {item!r}")
            return cls(item, base, filter=bool(suffix))
        item = dict(item)
        return cls(item.pop("name"), item.pop("method"), **item)

    @property
    def collection_key(self) -> tuple:
        return (self.method, self.dbar_max, self.sigma)


@dataclass
class Experiment:
    env: Env
    methods: list
    K: list
    seeds: list
    n_eval: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    collection: dict = field(default_factory=dict)
    vf_path: str | None = None
    name: str = "experiment"
    save_artifacts: bool = True

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "Experiment":
        base = base or Path(".")
        env_ref = d["env"]
        if isinstance(env_ref, dict):
            env = env_from_dict(env_ref)
        elif env_ref in BUILTIN_ENVS:
            env = env_from_dict(BUILTIN_ENVS[env_ref]())
        else:
            env = load_env(base / env_ref)
        seeds = d.get("seeds", 10 if env.model.name == "unicycle" else 5)
        seeds = list(range(seeds)) if isinstance(seeds, int) else [int(s) for s in seeds]
        vf = d.get("vf")
        return cls(
            env=env,
            methods=[MethodSpec.parse(m) for m in d["methods"]],
            K=[int(k) for k in d["K"]],
            seeds=seeds,
            n_eval=int(d.get("n_eval", 100 if env.model.name == "unicycle" else 16)),
            train=TrainConfig.from_dict(d.get("train", {})),
            filter=FilterConfig(**d.get("filter", {})),
            collection=dict(d.get("collection", {})),
            vf_path=str(base / vf) if vf else None,
            name=d.get("name", "experiment"),
            save_artifacts=bool(d.get("save_artifacts", True)),
        )


def _load_or_solve_vf(exp: Experiment, out: Path) -> ValueFunction:
    if exp.vf_path and Path(exp.vf_path).exists():
        vf = bench_io.load_vf(exp.vf_path)
        check_env_match(vf, exp.env)
        return vf
    vf = solve_env(exp.env)
    path = Path(exp.vf_path) if exp.vf_path else out / "vf.sgvf"
    bench_io.save_vf(vf, path)
    return vf


def _plan(exp: Experiment, m: MethodSpec, K: int, seed: int) -> CollectionPlan:
    kw = {k: v for k, v in exp.collection.items()
          if k in ("sigma", "dart_iterations", "dart_alpha", "dagger_iterations", "dbar_max")}
    if m.dbar_max is not None:
        kw["dbar_max"] = m.dbar_max * exp.env.model.omega_max
    if m.sigma is not None:
        kw["sigma"] = m.sigma
    return CollectionPlan(method=m.method, K=K, seed=seed, **kw)


_PREFIX_METHODS = ("bc", "safegil", "gauss", "uniform")


def run_experiment(spec: dict | Experiment, out_dir, base: Path | None = None) -> list[dict]:
    """Sweep methods x K x seeds: collect, train, evaluate; write CSV and SVG.

    Methods whose collection does not depend on K (no learner in the loop)
    collect the largest K once per seed and train on prefixes; demonstration
    streams are keyed by demo index so the prefix equals a fresh collection.
    """
    exp = spec if isinstance(spec, Experiment) else Experiment.from_dict(spec, base)
    out = Path(out_dir)
    vf = _load_or_solve_vf(exp, out)
    env = exp.env
    expert = make_expert(env)
    rows = []
    datasets: dict = {}
    policies: dict = {}

    def train_fn_for(seed):
        cfg = TrainConfig(**{**exp.train.__dict__, "seed": seed})
        return lambda ds: train_on_dataset(ds, env, cfg)

    for m in exp.methods:
        for seed in exp.seeds:
            for K in exp.K:
                t0 = time.perf_counter()
                row = {"method": m.name, "K": K, "seed": seed, "env_hash": env.hash}
                try:
                    plan = _plan(exp, m, K, seed)
                    row["dbar_max"] = plan.bound(env)
                    pkey = (m.collection_key, K, seed)
                    if pkey not in policies:
                        if m.method in _PREFIX_METHODS:
                            dkey = (m.collection_key, seed)
                            if dkey not in datasets:
                                full = _plan(exp, m, max(exp.K), seed)
                                datasets[dkey] = collect(env, expert, full, vf=vf)
                            ds = datasets[dkey].subset(K)
                        else:
                            ds = collect(env, expert, plan, vf=vf, train_fn=train_fn_for(seed))
                        pol = train_fn_for(seed)(ds)
                        policies[pkey] = (ds, pol)
                        if exp.save_artifacts:
                            tag = f"{m.collection_key[0]}_d{plan.bound(env):g}_K{K}_s{seed}"
                            if m.sigma is not None:
                                tag += f"_sig{m.sigma:g}"
                            bench_io.save_dataset(ds, out / "datasets" / f"{tag}.jsonl")
                            bench_io.save_policy(pol, out / "policies" / f"{tag}.json")
                    ds, pol = policies[pkey]
                    shield = SafetyFilter(vf, exp.filter) if m.filter else None
                    row.update(evaluate(env, PolicyController(pol, shield), exp.n_eval, seed, vf))
                    row.pop("start_min_value", None)
                    row["dataset_records"] = len(ds)
                    outcomes = ds.demo_outcomes()
                    row["expert_failure_rate"] = sum(o == "failure" for o in outcomes.values()) / len(outcomes)
                    v = np.array([r.v_safe for r in ds.records])
                    row["v_safe_mean"] = float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")
                    row["error"] = ""
                except Exception as exc:  # a failed cell must not stop the sweep
                    log.exception("cell %s K=%d seed=%d failed", m.name, K, seed)
                    row["error"] = f"{type(exc).__name__}: {exc}"
                row["runtime_s"] = round(time.perf_counter() - t0, 3)
                rows.append(row)
                log.info("%s K=%d seed=%d failure=%.3f", m.name, K, seed, row.get("failure_rate", float("nan")))
    rows.sort(key=lambda r: (r["method"], r["K"], r["seed"]))
    bench_io.write_report(rows, out / "reports" / f"{exp.name}.csv")
    # wall-clock numbers live beside the report so the CSV stays reproducible
    timing = [{k: r[k] for k in ("method", "K", "seed", "runtime_s")} for r in rows]
    bench_io.atomic_write(out / "logs" / f"{exp.name}.timing.json", json.dumps(timing, indent=1) + "\n")
    write_plots(rows, out / "plots", exp.name)
    return rows


# --- aggregation and plots ----------------------------------------------------------------

def aggregate(rows, metric: str) -> dict:
    """``{method: {K: (mean, std, per-seed values)}}`` ignoring failed cells and NaNs."""
    acc: dict = {}
    for r in sorted(rows, key=lambda r: (r["method"], r["K"], r["seed"])):
        v = r.get(metric)
        if r.get("error") or v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        acc.setdefault(r["method"], {}).setdefault(r["K"], []).append(float(v))
    return {m: {k: (float(np.mean(vs)), float(np.std(vs)), vs) for k, vs in sorted(ks.items())}
            for m, ks in sorted(acc.items())}


def mean_metric(rows, method: str, K: int, metric: str) -> float:
    agg = aggregate(rows, metric)
    return agg.get(method, {}).get(K, (float("nan"),))[0]


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def plot_svg(rows, metric: str, title: str = "", width: int = 640, height: int = 400) -> str:
    """Line chart of per-method means over K with a one-std band."""
    agg = aggregate(rows, metric)
    if not agg:
        raise ValueError(f"no {metric} values to plot")
    Ks = sorted({k for m in agg.values() for k in m})
    left, right, top, bottom = 60, 150, 30, 40
    pw, ph = width - left - right, height - top - bottom
    lo = min((mu - sd for m in agg.values() for mu, sd, _ in m.values()), default=0.0)
    hi = max((mu + sd for m in agg.values() for mu, sd, _ in m.values()), default=1.0)
    lo = min(lo, 0.0)
    if hi <= lo:
        hi = lo + 1.0

    def sx(k):
        return left + (pw * Ks.index(k) / (len(Ks) - 1) if len(Ks) > 1 else pw / 2)

    def sy(v):
        return top + ph * (1.0 - (v - lo) / (hi - lo))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="13">{title or metric}</text>',
             f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
             f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>']
    for k in Ks:
        parts.append(f'<text x="{sx(k):.1f}" y="{top + ph + 16}" text-anchor="middle">{k}</text>')
    for i in range(5):
        v = lo + (hi - lo) * i / 4
        parts.append(f'<text x="{left - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.3g}</text>')
    parts.append(f'<text x="{left + pw / 2:.1f}" y="{height - 6}" text-anchor="middle">K (demonstrations)</text>')
    for i, (method, ks) in enumerate(agg.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(sx(k), sy(mu), sy(mu + sd), sy(mu - sd)) for k, (mu, sd, _) in ks.items()]
        band = [f"{x:.1f},{u:.1f}" for x, _, u, _ in pts] + [f"{x:.1f},{d:.1f}" for x, _, _, d in reversed(pts)]
        parts.append(f'<polygon points="{" ".join(band)}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{x:.1f},{y:.1f}" for x, y, _, _ in pts)
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = top + 14 * i + 8
        parts.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 28}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{left + pw + 32}" y="{ly + 4}">{method}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_plots(rows, plot_dir, name: str) -> list[Path]:
    plot_dir = Path(plot_dir)
    paths = []
    for metric in ("failure_rate", "safe_cost"):
        if not aggregate(rows, metric):
            continue
        p = plot_dir / f"{name}_{metric}.svg"
        bench_io.atomic_write(p, plot_svg(rows, metric, f"{name}: {metric.replace('_', ' ')}"))
        paths.append(p)
    return paths


def summary_table(rows, metrics=("failure_rate", "safe_cost")) -> str:
    """Plain-text mean +/- std table per method and K."""
    lines = []
    for metric in metrics:
        lines.append(f"[{metric}]")
        for method, ks in aggregate(rows, metric).items():
            cells = "  ".join(f"K={k}: {mu:.4g}+/-{sd:.3g}" for k, (mu, sd, _) in ks.items())
            lines.append(f"  {method:<20} {cells}")
    return "\n".join(lines) + "\n"


def load_experiment(path) -> dict:
    path = Path(path)
    return json.loads(path.read_text())
