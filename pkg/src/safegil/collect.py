"""Demonstration collection with and without input perturbation.

Every demonstration draws from three random streams keyed by
``(seed, demo_id)``: start state, expert internals and injected
disturbance. Keeping them separate means that a method with zero injected
disturbance reproduces plain behavior cloning record for record.

Labels are always the clean expert action; only the applied input is
perturbed.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .envmodels import Env, sample_start
from .reach import ValueFunction, check_env_match, query_disturbance, query_value

log = logging.getLogger(__name__)

METHODS = ("safegil", "bc", "gauss", "uniform", "dart", "dagger", "dagger_safegil")

_START, _EXPERT, _NOISE = 0, 1, 2


@dataclass
class DemoRecord:
    demo_id: int
    t: float
    x: np.ndarray
    u_expert: float
    u_applied: float
    dbar: float
    v_safe: float = float("nan")
    flag: str = ""

    def __eq__(self, other):
        if not isinstance(other, DemoRecord):
            return NotImplemented
        same_v = (self.v_safe == other.v_safe) or (math.isnan(self.v_safe) and math.isnan(other.v_safe))
        return (self.demo_id == other.demo_id and self.t == other.t and np.array_equal(self.x, other.x)
                and self.u_expert == other.u_expert and self.u_applied == other.u_applied
                and self.dbar == other.dbar and same_v and self.flag == other.flag)


@dataclass
class Dataset:
    records: list
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    @property
    def states(self) -> np.ndarray:
        return np.array([r.x for r in self.records])

    @property
    def labels(self) -> np.ndarray:
        return np.array([r.u_expert for r in self.records])

    @property
    def demo_ids(self) -> list[int]:
        return sorted({r.demo_id for r in self.records})

    def demo_outcomes(self) -> dict[int, str]:
        return {r.demo_id: r.flag for r in self.records}

    def subset(self, k: int) -> "Dataset":
        """The first ``k`` demonstrations."""
        keep = set(self.demo_ids[:k])
        prov = dict(self.provenance, K=k)
        return Dataset([r for r in self.records if r.demo_id in keep], prov)

    def validate(self) -> None:
        ids = self.demo_ids
        if ids and ids != list(range(ids[0], ids[0] + len(ids))):
            raise ValueError("demo ids are not contiguous")
        last: dict[int, float] = {}
        for r in self.records:
            if r.demo_id in last and r.t <= last[r.demo_id]:
                raise ValueError(f"timestamps not increasing in demo {r.demo_id}")
            last[r.demo_id] = r.t


def merge(parts, provenance: dict) -> Dataset:
    records = [r for p in parts for r in p.records]
    records.sort(key=lambda r: (r.demo_id, r.t))
    return Dataset(records, provenance)


@dataclass
class CollectionPlan:
    method: str = "bc"
    K: int = 10
    seed: int = 0
    dbar_max: float | None = None  # defaults to the environment's bound
    sigma: float = 0.3
    dart_iterations: int = 3
    dart_alpha: float = 1.0
    dagger_iterations: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown collection method {self.method!r}")
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.dart_iterations < 1 or self.dagger_iterations < 1:
            raise ValueError("iteration counts must be >= 1")

    def bound(self, env: Env) -> float:
        return env.dbar_max if self.dbar_max is None else float(self.dbar_max)


def streams(seed: int, demo_id: int):
    return tuple(np.random.default_rng([seed, demo_id, s]) for s in (_START, _EXPERT, _NOISE))


def sample_valid_start(env: Env, rng: np.random.Generator, vf: ValueFunction | None = None,
                       min_value: float | None = None, max_tries: int = 10_000) -> np.ndarray:
    """Rejection-sample a start outside the failure set (and above ``min_value``)."""
    for _ in range(max_tries):
        x = sample_start(env, rng)
        if env.target(x) <= 0:
            continue
        if vf is not None and min_value is not None and query_value(vf, x, 0.0, clamp=True) <= min_value:
            continue
        return x
    raise RuntimeError("could not sample a valid start state")


Perturb = Callable[[np.ndarray, float, np.random.Generator], "tuple[float, float]"]


def run_demo(env: Env, expert, demo_id: int, seed: int, perturb: Perturb | None = None,
             actor=None, vf: ValueFunction | None = None) -> list[DemoRecord]:
    """Roll out one demonstration and label every visited state with the expert.

    ``perturb(x, u_expert, rng) -> (d, dbar)`` adds a disturbance to the
    applied input; ``actor(x) -> u`` replaces the applied input entirely
    (on-policy collection).
    """
    rng_start, rng_expert, rng_noise = streams(seed, demo_id)
    x = sample_valid_start(env, rng_start)
    steps = int(round(env.timeout / env.dt))
    out = []
    outcome = "timeout"
    for step in range(steps):
        u_exp = float(expert(x, rng_expert))
        d, dbar = (0.0, 0.0) if perturb is None else perturb(x, u_exp, rng_noise)
        u_app = float(actor(x)) if actor is not None else u_exp + d
        v_safe = query_value(vf, x, vf.dbar_max, clamp=True) if vf is not None else float("nan")
        out.append(DemoRecord(demo_id, round(step * env.dt, 10), np.array(x, dtype=float), u_exp, u_app,
                              dbar, v_safe))
        x, low = env.advance(x, u_app)
        if low <= 0:
            outcome = "failure"
            break
        if env.at_goal(x):
            outcome = "goal"
            break
    for r in out:
        r.flag = outcome
    return out


def _provenance(env: Env, plan: CollectionPlan, **extra) -> dict:
    prov = {"method": plan.method, "K": plan.K, "seed": plan.seed, "env_name": env.name,
            "env_hash": env.hash, "model": env.model.to_dict(), "dbar_max": plan.bound(env)}
    prov.update(extra)
    return prov


def _collect(env, expert, plan, ids, perturb=None, vf=None, actor=None) -> Dataset:
    records = []
    for i in ids:
        records.extend(run_demo(env, expert, i, plan.seed, perturb=perturb, actor=actor, vf=vf))
    return Dataset(records, _provenance(env, plan))


def _check_vf(env: Env, vf: ValueFunction, dbar_max: float):
    if vf is None:
        raise ValueError("a solved value function is required")
    check_env_match(vf, env)
    if dbar_max > vf.dbar_max + 1e-12:
        raise ValueError(f"value function covers dbar up to {vf.dbar_max}, plan needs {dbar_max}")


def safegil_perturbation(vf: ValueFunction, dbar_max: float) -> Perturb:
    """Sample a bound uniformly, then push along the worst-case direction."""

    def perturb(x, u, rng):
        dbar = float(rng.uniform(0.0, dbar_max))
        if dbar == 0.0:
            return 0.0, 0.0
        return query_disturbance(vf, x, dbar, clamp=True), dbar

    return perturb


def collect_safegil(env: Env, expert, vf: ValueFunction, plan: CollectionPlan, log_vf: bool = True) -> Dataset:
    dmax = plan.bound(env)
    _check_vf(env, vf, dmax)
    ds = _collect(env, expert, plan, range(plan.K), perturb=safegil_perturbation(vf, dmax),
                  vf=vf if log_vf else None)
    return ds


def collect_bc(env: Env, expert, plan: CollectionPlan, vf: ValueFunction | None = None) -> Dataset:
    return _collect(env, expert, plan, range(plan.K), vf=vf)


def truncated_normal(rng: np.random.Generator, std: float, bound: float) -> float:
    """Normal sample conditioned on ``|d| <= bound`` (by rejection)."""
    if std <= 0 or bound <= 0:
        return 0.0
    while True:
        d = float(rng.normal(0.0, std))
        if abs(d) <= bound:
            return d


def noise_perturbation(kind: str, sigma: float, bound: float) -> Perturb:
    def perturb(x, u, rng):
        if kind == "gauss":
            return truncated_normal(rng, sigma, bound), bound
        if sigma == 0 or bound == 0:
            return 0.0, bound
        return float(rng.uniform(-bound, bound)), bound

    return perturb


def collect_noise(env: Env, expert, plan: CollectionPlan, vf: ValueFunction | None = None) -> Dataset:
    """Gaussian or uniform random input noise; ``sigma = 0`` disables both."""
    if plan.method not in ("gauss", "uniform"):
        raise ValueError("collect_noise needs method 'gauss' or 'uniform'")
    perturb = noise_perturbation(plan.method, plan.sigma, plan.bound(env))
    ds = _collect(env, expert, plan, range(plan.K), perturb=perturb, vf=vf)
    ds.provenance["sigma"] = plan.sigma
    return ds


def _tranches(K: int, iterations: int) -> list[list[int]]:
    return [list(map(int, a)) for a in np.array_split(np.arange(K), min(iterations, K))]


def dart_collect(env: Env, expert, plan: CollectionPlan, train_fn, vf: ValueFunction | None = None) -> Dataset:
    """Noise injection whose variance tracks the current learner's error.

    The ``K`` demonstrations are split into tranches. The first is
    noise-free; before each later tranche a policy is trained on everything
    so far and the injected variance is ``alpha`` times its mean squared
    deviation from the expert labels.
    """
    bound = plan.bound(env)
    parts = []
    variances = []
    for i, ids in enumerate(_tranches(plan.K, plan.dart_iterations)):
        if i == 0:
            var = 0.0
        else:
            sofar = merge(parts, {})
            policy = train_fn(sofar)
            pred = policy.predict(sofar.states)
            var = float(np.mean((sofar.labels - pred) ** 2))
        variances.append(var)
        std = math.sqrt(plan.dart_alpha * var)

        def perturb(x, u, rng, std=std):
            return truncated_normal(rng, std, bound), bound

        parts.append(_collect(env, expert, plan, ids, perturb=perturb if std > 0 else None, vf=vf))
    return merge(parts, _provenance(env, plan, dart_alpha=plan.dart_alpha, dart_variances=variances))


def dagger_collect(env: Env, expert, plan: CollectionPlan, train_fn, inject_safegil: bool = False,
                   vf: ValueFunction | None = None) -> Dataset:
    """Dataset aggregation over ``dagger_iterations`` tranches of the K rollouts.

    The first tranche is driven by the expert (with worst-case disturbance
    when ``inject_safegil``); later tranches are driven by the policy trained
    on everything collected so far, with expert labels at every visited state.
    """
    if inject_safegil:
        _check_vf(env, vf, plan.bound(env))
    parts = []
    for i, ids in enumerate(_tranches(plan.K, plan.dagger_iterations)):
        if i == 0:
            perturb = safegil_perturbation(vf, plan.bound(env)) if inject_safegil else None
            parts.append(_collect(env, expert, plan, ids, perturb=perturb, vf=vf))
        else:
            policy = train_fn(merge(parts, {}))
            parts.append(_collect(env, expert, plan, ids, actor=policy, vf=vf))
    return merge(parts, _provenance(env, plan, inject_safegil=inject_safegil))


def collect(env: Env, expert, plan: CollectionPlan, vf: ValueFunction | None = None, train_fn=None) -> Dataset:
    """Dispatch on ``plan.method``."""
    m = plan.method
    if m == "bc":
        return collect_bc(env, expert, plan, vf=vf)
    if m == "safegil":
        return collect_safegil(env, expert, vf, plan)
    if m in ("gauss", "uniform"):
        return collect_noise(env, expert, plan, vf=vf)
    if train_fn is None:
        raise ValueError(f"method {m!r} needs a training function")
    if m == "dart":
        return dart_collect(env, expert, plan, train_fn, vf=vf)
    return dagger_collect(env, expert, plan, train_fn, inject_safegil=(m == "dagger_safegil"), vf=vf)
