"""Scripted expert controllers.

``mpc_expert`` plans turn-rate sequences for the unicycle with the
cross-entropy method; ``pid_expert`` tracks the runway centerline.
Both return the clean expert action; disturbance injection happens in
:mod:`safegil.collect`.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .envmodels import CircleWorld, Env, UnicycleModel


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 20
    dt: float = 0.1
    w_goal: float = 1.0
    w_obs: float = 100.0
    w_u: float = 0.1
    margin: float = 0.2
    population: int = 64
    elites: int = 8
    iterations: int = 3
    init_std: float = 0.5  # fraction of the control bound

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if min(self.w_goal, self.w_obs, self.w_u) < 0:
            raise ValueError("weights must be non-negative")
        if not (self.population > self.elites >= 1):
            raise ValueError("need population > elites >= 1")


@dataclass(frozen=True)
class PidConfig:
    k_cte: float = 0.08
    k_he: float = 1.2
    heading_cap: float = 0.5

    def __post_init__(self):
        if self.k_cte <= 0 or self.k_he <= 0 or self.heading_cap <= 0:
            raise ValueError("PID gains must be positive")


def mpc_cost(env: Env, states, controls, cfg: MpcConfig) -> float:
    """Quadratic goal distance, squared obstacle-margin violation and control energy.

    ``states`` has one more entry than ``controls``; the last state only
    contributes its goal and obstacle terms.
    """
    states = np.asarray(states, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if len(states) != len(controls) + 1:
        raise ValueError("need len(states) == len(controls) + 1")
    geo = env.geometry
    goal = cfg.w_goal * geo.goal_distance_sq(states)
    pen = cfg.w_obs * np.maximum(0.0, cfg.margin - geo.target(states)) ** 2
    return float(goal.sum() + pen.sum() + cfg.w_u * np.sum(controls ** 2))


@njit(cache=True)
def _rollout_costs(x0, U, v, limit, dt, nsub, obstacles, ws, goal, w_goal, w_obs, w_u, margin):
    """Simulate each control sequence in ``U`` with RK4 and score it.

    Returns ``(costs, min_l)`` per sequence.
    """
    pop, horizon = U.shape
    costs = np.empty(pop)
    min_l = np.empty(pop)
    h = dt / nsub
    for s in range(pop):
        px, py, th = x0[0], x0[1], x0[2]
        total = 0.0
        lowest = np.inf
        for t in range(horizon + 1):
            # stage terms on the current state
            gd = (px - goal[0]) ** 2 + (py - goal[1]) ** 2
            lv = min(min(px - ws[0], ws[1] - px), min(py - ws[2], ws[3] - py))
            for o in range(obstacles.shape[0]):
                dd = math.sqrt((px - obstacles[o, 0]) ** 2 + (py - obstacles[o, 1]) ** 2) - obstacles[o, 2]
                if dd < lv:
                    lv = dd
            if lv < lowest:
                lowest = lv
            pen = margin - lv
            total += w_goal * gd
            if pen > 0:
                total += w_obs * pen * pen
            if t == horizon:
                break
            u = U[s, t]
            total += w_u * u * u
            w = min(max(u, -limit), limit)
            for _ in range(nsub):
                k1x, k1y = v * math.cos(th), v * math.sin(th)
                t2 = th + 0.5 * h * w
                k2x, k2y = v * math.cos(t2), v * math.sin(t2)
                t4 = th + h * w
                k4x, k4y = v * math.cos(t4), v * math.sin(t4)
                # k3 equals k2 because the heading rate is constant over the step
                px += h / 6.0 * (k1x + 4.0 * k2x + k4x)
                py += h / 6.0 * (k1y + 4.0 * k2y + k4y)
                th = t4
        costs[s] = total
        min_l[s] = lowest
    return costs, min_l


@dataclass
class MpcPlan:
    controls: np.ndarray
    cost: float
    min_l: float
    all_colliding: bool


def _world_arrays(env: Env):
    geo = env.geometry
    if not isinstance(geo, CircleWorld) or not isinstance(env.model, UnicycleModel):
        raise TypeError("MPC expert supports the unicycle circle world only")
    obs = np.array([[o.center[0], o.center[1], o.radius] for o in geo.obstacles], dtype=float).reshape(-1, 3)
    ws = np.array([geo.workspace[0][0], geo.workspace[0][1], geo.workspace[1][0], geo.workspace[1][1]])
    return obs, ws, np.asarray(geo.goal_center, dtype=float)


def score_sequences(env: Env, x, U, cfg: MpcConfig):
    """Costs and minimum clearance for a batch of control sequences."""
    obs, ws, goal = _world_arrays(env)
    nsub = max(1, int(round(cfg.dt / env.substep)))
    m = env.model
    return _rollout_costs(np.asarray(x, dtype=float), np.ascontiguousarray(U, dtype=float), m.v,
                          m.input_limit, cfg.dt, nsub, obs, ws, goal, cfg.w_goal, cfg.w_obs, cfg.w_u, cfg.margin)


def mpc_plan(env: Env, x, cfg: MpcConfig, rng: np.random.Generator) -> MpcPlan:
    """Cross-entropy search over clipped turn-rate sequences.

    The current mean is always part of the population and the best sequence
    scored so far is kept, so the returned plan never scores worse than any
    evaluated sequence.
    """
    wmax = env.model.omega_max
    mean = np.zeros(cfg.horizon)
    std = np.full(cfg.horizon, cfg.init_std * wmax)
    best, best_cost, best_l = None, np.inf, np.inf
    all_bad = True
    for _ in range(cfg.iterations):
        U = mean + std * rng.standard_normal((cfg.population, cfg.horizon))
        U[0] = mean
        np.clip(U, -wmax, wmax, out=U)
        costs, min_l = score_sequences(env, x, U, cfg)
        all_bad &= bool(np.all(min_l <= 0.0))
        order = np.argsort(costs, kind="stable")[: cfg.elites]
        if costs[order[0]] < best_cost:
            best, best_cost, best_l = U[order[0]].copy(), float(costs[order[0]]), float(min_l[order[0]])
        elite = U[order]
        mean = elite.mean(axis=0)
        std = elite.std(axis=0)
    cost, low = score_sequences(env, x, mean[None], cfg)
    if cost[0] < best_cost:
        best, best_cost, best_l = mean, float(cost[0]), float(low[0])
    return MpcPlan(best, best_cost, best_l, all_bad)


def mpc_expert(env: Env, x, cfg: MpcConfig, rng: np.random.Generator) -> float:
    return float(mpc_plan(env, x, cfg, rng).controls[0])


def pid_expert(model, x, cfg: PidConfig) -> float:
    """Steer toward the centerline through a capped heading reference."""
    theta_des = -float(np.clip(cfg.k_cte * x[0], -cfg.heading_cap, cfg.heading_cap))
    return float(np.clip(-cfg.k_he * (x[2] - theta_des), -model.omega_max, model.omega_max))


class Expert:
    """Callable expert ``u = expert(x, rng)`` bound to an environment."""

    kind = "expert"
    flagged = False

    def __call__(self, x, rng: np.random.Generator) -> float:
        raise NotImplementedError

    def config(self) -> dict:
        return {"kind": self.kind}


class MpcExpert(Expert):
    kind = "mpc"

    def __init__(self, env: Env, cfg: MpcConfig | None = None):
        self.env = env
        self.cfg = cfg or MpcConfig()

    def __call__(self, x, rng):
        plan = mpc_plan(self.env, x, self.cfg, rng)
        self.flagged = plan.all_colliding
        return float(plan.controls[0])

    def config(self):
        return {"kind": self.kind, **asdict(self.cfg)}


class PidExpert(Expert):
    kind = "pid"

    def __init__(self, env: Env, cfg: PidConfig | None = None):
        self.model = env.model
        self.cfg = cfg or PidConfig()

    def __call__(self, x, rng=None):
        return pid_expert(self.model, x, self.cfg)

    def config(self):
        return {"kind": self.kind, **asdict(self.cfg)}


class ProportionalExpert(Expert):
    """Drive a 1-D integrator toward its goal point."""

    kind = "proportional"

    def __init__(self, env: Env, gain: float = 1.0):
        self.env = env
        self.gain = gain

    def __call__(self, x, rng=None):
        ub = self.env.model.omega_max
        target = self.env.geometry.goal_x + 0.5
        return float(np.clip(self.gain * (target - x[0]), -ub, ub))

    def config(self):
        return {"kind": self.kind, "gain": self.gain}


def make_expert(env: Env) -> Expert:
    spec = dict(env.expert)
    kind = spec.pop("kind", None)
    if kind == "mpc":
        return MpcExpert(env, MpcConfig(**spec))
    if kind == "pid":
        return PidExpert(env, PidConfig(**spec))
    if kind == "proportional":
        return ProportionalExpert(env, **spec)
    raise ValueError(f"unknown expert kind {kind!r}")
