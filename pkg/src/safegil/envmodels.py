"""Dynamics, Hamiltonians and environment geometry for the case studies.

Every model here is control-affine in a scalar input with a box constraint,
so its Hamiltonian has the form ``H(x, p) = <b(x), p> + sum_i c_i |p_i|``.
``hamiltonian_terms`` exposes ``b`` and ``c`` so the grid solver stays
model-agnostic.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numba import njit

from .gridcore import Axis, Grid


class ModelError(ValueError):
    pass


def _sign(p):
    return np.sign(p)


def wrap_angle(theta):
    """Wrap to ``[-pi, pi)``."""
    return (np.asarray(theta) + math.pi) % (2 * math.pi) - math.pi


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ModelError("non-finite input to dynamics")


@njit(cache=True)
def _heading_substeps(x, rate, v, h, n, taxi):
    """RK4 substeps for the planar models under a constant turn rate.

    With the heading rate fixed over a step the second and third RK stages
    coincide, so the update needs three trig evaluations per stage.
    """
    out = np.empty((n, 3))
    px, py, th = x[0], x[1], x[2]
    for i in range(n):
        t2 = th + 0.5 * h * rate
        t4 = th + h * rate
        if taxi:
            px += h / 6.0 * v * (math.sin(th) + 4.0 * math.sin(t2) + math.sin(t4))
            py += h / 6.0 * v * (math.cos(th) + 4.0 * math.cos(t2) + math.cos(t4))
        else:
            px += h / 6.0 * v * (math.cos(th) + 4.0 * math.cos(t2) + math.cos(t4))
            py += h / 6.0 * v * (math.sin(th) + 4.0 * math.sin(t2) + math.sin(t4))
        th = (t4 + math.pi) % (2.0 * math.pi) - math.pi
        out[i, 0] = px
        out[i, 1] = py
        out[i, 2] = th
    return out


def _scalar_inputs(x, u, d):
    u, d = float(u), float(d)
    if not (math.isfinite(u) and math.isfinite(d) and np.all(np.isfinite(x))):
        raise ModelError("non-finite input to dynamics")
    return u, d


@dataclass(frozen=True)
class Integrator1D:
    """``x' = u + d`` with ``|u| <= ubar``; target ``l(x) = x``."""

    ubar: float = 1.0
    name = "integrator1d"
    state_dim = 1
    heading = None

    @property
    def omega_max(self) -> float:
        return self.ubar

    def flow(self, x, u, d):
        x = np.asarray(x, dtype=float)
        _check_finite(x, u, d)
        return np.broadcast_to(np.asarray(u + d, dtype=float)[..., None], x.shape).copy()

    def substeps(self, x, u, d, h, n) -> np.ndarray:
        u, d = _scalar_inputs(x, u, d)
        return (x[0] + h * (u + d) * np.arange(1, n + 1))[:, None]

    def hamiltonian(self, x, p, dbar) -> float:
        p = np.asarray(p, dtype=float)
        return float((self.ubar - dbar) * abs(p[0]))

    def optimal_control(self, x, p) -> float:
        return float(self.ubar * _sign(p[0]))

    def optimal_disturbance(self, x, p, dbar) -> float:
        return float(-dbar * _sign(p[0]))

    def dissipation(self, dbar) -> np.ndarray:
        return np.array([abs(self.ubar - dbar)])

    def hamiltonian_terms(self, points, dbar):
        drift = np.zeros_like(points, dtype=float)
        return drift, np.array([self.ubar - dbar])

    def to_dict(self) -> dict:
        return {"name": self.name, "ubar": self.ubar}


@dataclass(frozen=True)
class UnicycleModel:
    """Constant-speed unicycle ``(p_x, p_y, theta)`` steered by turn rate.

    The applied turn rate ``u + d`` saturates at ``input_limit``, which is
    set to ``omega_max + dbar_max`` so injected disturbance is never clipped.
    """

    v: float = 1.0
    omega_max: float = 1.0
    input_limit: float = 1.6
    name = "unicycle"
    state_dim = 3
    heading = 2

    def __post_init__(self):
        if self.v <= 0 or self.omega_max <= 0:
            raise ModelError("unicycle needs v > 0 and omega_max > 0")

    def flow(self, x, u, d):
        x = np.asarray(x, dtype=float)
        _check_finite(x, u, d)
        w = np.clip(np.asarray(u, dtype=float) + d, -self.input_limit, self.input_limit)
        th = x[..., 2]
        return np.stack([self.v * np.cos(th), self.v * np.sin(th), np.broadcast_to(w, th.shape)], axis=-1)

    def substeps(self, x, u, d, h, n) -> np.ndarray:
        u, d = _scalar_inputs(x, u, d)
        w = min(max(u + d, -self.input_limit), self.input_limit)
        return _heading_substeps(np.asarray(x, dtype=float), w, self.v, h, n, False)

    def _check_dbar(self, dbar):
        if dbar < 0 or dbar > self.omega_max + 1e-12:
            raise ModelError(f"disturbance bound {dbar} outside [0, {self.omega_max}]")

    def hamiltonian(self, x, p, dbar) -> float:
        self._check_dbar(dbar)
        th = x[2]
        return float(p[0] * self.v * math.cos(th) + p[1] * self.v * math.sin(th)
                     + (self.omega_max - dbar) * abs(p[2]))

    def optimal_control(self, x, p) -> float:
        return float(self.omega_max * _sign(p[2]))

    def optimal_disturbance(self, x, p, dbar) -> float:
        return float(-dbar * _sign(p[2]))

    def dissipation(self, dbar) -> np.ndarray:
        return np.array([self.v, self.v, self.omega_max - dbar])

    def hamiltonian_terms(self, points, dbar):
        self._check_dbar(dbar)
        th = points[:, 2]
        drift = np.stack([self.v * np.cos(th), self.v * np.sin(th), np.zeros_like(th)], axis=-1)
        return drift, np.array([0.0, 0.0, self.omega_max - dbar])

    def to_dict(self) -> dict:
        return {"name": self.name, "v": self.v, "omega_max": self.omega_max, "input_limit": self.input_limit}


@dataclass(frozen=True)
class TaxiModel:
    """Runway taxiing: crosstrack ``p_x``, downtrack ``p_y``, heading error.

    ``p_x' = v sin(theta)``, ``p_y' = v cos(theta)``,
    ``theta' = (v / h) tan(clip(u + d))`` with the steering stop at
    ``omega_max``.
    """

    v: float = 5.0
    h: float = 5.0
    omega_max: float = 1.0
    name = "taxi"
    state_dim = 3
    heading = 2

    def __post_init__(self):
        if self.v <= 0 or self.h <= 0 or self.omega_max <= 0:
            raise ModelError("taxi needs positive v, h and omega_max")
        if self.omega_max >= math.pi / 2:
            raise ModelError("steering bound must stay below pi/2")

    def flow(self, x, u, d):
        x = np.asarray(x, dtype=float)
        _check_finite(x, u, d)
        steer = np.clip(np.asarray(u, dtype=float) + d, -self.omega_max, self.omega_max)
        th = x[..., 2]
        return np.stack([self.v * np.sin(th), self.v * np.cos(th),
                         np.broadcast_to((self.v / self.h) * np.tan(steer), th.shape)], axis=-1)

    def _check_dbar(self, dbar):
        if dbar < 0 or dbar > self.omega_max + 1e-12:
            raise ModelError(f"disturbance bound {dbar} outside [0, {self.omega_max}]")

    def substeps(self, x, u, d, h, n) -> np.ndarray:
        u, d = _scalar_inputs(x, u, d)
        steer = min(max(u + d, -self.omega_max), self.omega_max)
        rate = (self.v / self.h) * math.tan(steer)
        return _heading_substeps(np.asarray(x, dtype=float), rate, self.v, h, n, True)

    def _turn_authority(self, dbar) -> float:
        return (self.v / self.h) * math.tan(self.omega_max - dbar)

    def hamiltonian(self, x, p, dbar) -> float:
        self._check_dbar(dbar)
        th = x[2]
        return float(p[0] * self.v * math.sin(th) + p[1] * self.v * math.cos(th)
                     + self._turn_authority(dbar) * abs(p[2]))

    def optimal_control(self, x, p) -> float:
        return float(self.omega_max * _sign(p[2]))

    def optimal_disturbance(self, x, p, dbar) -> float:
        return float(-dbar * _sign(p[2]))

    def dissipation(self, dbar) -> np.ndarray:
        return np.array([self.v, self.v, self._turn_authority(dbar)])

    def hamiltonian_terms(self, points, dbar):
        self._check_dbar(dbar)
        th = points[:, 2]
        drift = np.stack([self.v * np.sin(th), self.v * np.cos(th), np.zeros_like(th)], axis=-1)
        return drift, np.array([0.0, 0.0, self._turn_authority(dbar)])

    def to_dict(self) -> dict:
        return {"name": self.name, "v": self.v, "h": self.h, "omega_max": self.omega_max}


MODELS = {"integrator1d": Integrator1D, "unicycle": UnicycleModel, "taxi": TaxiModel}


def model_from_dict(spec: dict):
    spec = dict(spec)
    name = spec.pop("name")
    if name not in MODELS:
        raise ModelError(f"unknown model {name!r}")
    return MODELS[name](**spec)


def step_rk4(model, x, u: float, d: float, dt: float) -> np.ndarray:
    """One classical Runge-Kutta step with inputs held over ``dt``."""
    if dt < 0:
        raise ModelError("dt must be non-negative")
    x = np.asarray(x, dtype=float)
    if dt == 0:
        return x.copy()
    if x.ndim == 1 and np.ndim(u) == 0 and np.ndim(d) == 0:
        return model.substeps(x, u, d, dt, 1)[0]
    k1 = model.flow(x, u, d)
    k2 = model.flow(x + 0.5 * dt * k1, u, d)
    k3 = model.flow(x + 0.5 * dt * k2, u, d)
    k4 = model.flow(x + dt * k3, u, d)
    out = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if model.heading is not None:
        out[..., model.heading] = wrap_angle(out[..., model.heading])
    return out


# --- geometry -------------------------------------------------------------

@dataclass(frozen=True)
class Circle:
    center: tuple[float, float]
    radius: float


@dataclass(frozen=True)
class CircleWorld:
    """Planar workspace with circular obstacles and a goal disk.

    The workspace walls are part of the failure set.
    """

    workspace: tuple[tuple[float, float], tuple[float, float]]
    obstacles: tuple[Circle, ...]
    goal_center: tuple[float, float]
    goal_radius: float
    kind = "circles"

    def target(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        px, py = x[..., 0], x[..., 1]
        (xlo, xhi), (ylo, yhi) = self.workspace
        out = np.minimum(np.minimum(px - xlo, xhi - px), np.minimum(py - ylo, yhi - py))
        for ob in self.obstacles:
            dist = np.hypot(px - ob.center[0], py - ob.center[1]) - ob.radius
            out = np.minimum(out, dist)
        return out

    def at_goal(self, x) -> bool:
        return bool(math.hypot(x[0] - self.goal_center[0], x[1] - self.goal_center[1]) <= self.goal_radius)

    def goal_distance_sq(self, x):
        x = np.asarray(x, dtype=float)
        return (x[..., 0] - self.goal_center[0]) ** 2 + (x[..., 1] - self.goal_center[1]) ** 2

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "workspace": [list(self.workspace[0]), list(self.workspace[1])],
            "obstacles": [{"center": list(o.center), "radius": o.radius} for o in self.obstacles],
            "goal": {"center": list(self.goal_center), "radius": self.goal_radius},
        }


@dataclass(frozen=True)
class Runway:
    half_width: float = 10.0
    length: float = 200.0
    kind = "runway"

    def target(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.half_width - np.abs(x[..., 0])

    def at_goal(self, x) -> bool:
        return bool(x[1] >= self.length)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "half_width": self.half_width, "length": self.length}


@dataclass(frozen=True)
class HalfLine:
    """Failure set ``x <= 0`` on a line; goal ``x >= goal_x``."""

    goal_x: float = 3.5
    kind = "halfline"

    def target(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float)[..., 0]

    def at_goal(self, x) -> bool:
        return bool(x[0] >= self.goal_x)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "goal_x": self.goal_x}


def geometry_from_dict(spec: dict):
    kind = spec["kind"]
    if kind == "circles":
        obstacles = tuple(Circle(tuple(map(float, o["center"])), float(o["radius"])) for o in spec["obstacles"])
        ws = spec["workspace"]
        return CircleWorld((tuple(map(float, ws[0])), tuple(map(float, ws[1]))), obstacles,
                           tuple(map(float, spec["goal"]["center"])), float(spec["goal"]["radius"]))
    if kind == "runway":
        return Runway(float(spec.get("half_width", 10.0)), float(spec.get("length", 200.0)))
    if kind == "halfline":
        return HalfLine(float(spec.get("goal_x", 3.5)))
    raise ModelError(f"unknown geometry kind {kind!r}")


# --- start distributions ----------------------------------------------------

def sample_start(env: "Env", rng: np.random.Generator) -> np.ndarray:
    s = env.start
    kind = s["kind"]
    if kind == "box_toward_goal":
        lo, hi = np.asarray(s["low"], float), np.asarray(s["high"], float)
        p = rng.uniform(lo, hi)
        gx, gy = env.geometry.goal_center
        th = math.atan2(gy - p[1], gx - p[0]) + rng.uniform(-s["heading_spread"], s["heading_spread"])
        return np.array([p[0], p[1], float(wrap_angle(th))])
    if kind == "runway":
        px = rng.uniform(*s["px"])
        th = rng.uniform(*s["theta"])
        return np.array([px, 0.0, th])
    if kind == "interval":
        return np.array([rng.uniform(s["low"], s["high"])])
    raise ModelError(f"unknown start distribution {kind!r}")


# --- environment bundle -------------------------------------------------------

@dataclass(frozen=True)
class Env:
    """Everything needed to simulate one case study, loaded from JSON."""

    name: str
    model: Any
    geometry: Any
    start: dict
    dbar_max: float
    dt: float
    substep: float
    timeout: float
    grid_spec: tuple
    solver: dict = field(default_factory=dict)
    expert: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.dbar_max <= self.model.omega_max + 1e-12) and self.model.name != "integrator1d":
            raise ModelError(f"dbar_max {self.dbar_max} exceeds control bound {self.model.omega_max}")
        if self.dt <= 0 or self.substep <= 0:
            raise ModelError("control period and integrator step must be positive")

    @property
    def omega_max(self) -> float:
        return self.model.omega_max

    def target(self, x):
        return self.geometry.target(x)

    def at_goal(self, x) -> bool:
        return self.geometry.at_goal(x)

    def grid(self) -> Grid:
        return Grid.from_dict(self.grid_spec)

    def step(self, x, u: float, d: float = 0.0) -> np.ndarray:
        """Advance one control period with RK4 substeps."""
        return self.advance(x, u, d)[0]

    def advance(self, x, u: float, d: float = 0.0):
        """Like :meth:`step` but also return the lowest target value at the substeps."""
        n = max(1, int(round(self.dt / self.substep)))
        path = self.model.substeps(np.asarray(x, dtype=float), u, d, self.dt / n, n)
        return path[-1].copy(), float(np.min(self.geometry.target(path)))

    @property
    def hash(self) -> str:
        """Fingerprint of the sections a value function depends on."""
        return env_hash({k: self.raw[k] for k in HASHED_KEYS if k in self.raw})

    def to_dict(self) -> dict:
        return self.raw


HASHED_KEYS = ("model", "geometry", "dbar_max", "grid", "solver")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def env_hash(raw: dict) -> str:
    return hashlib.sha256(canonical_json(raw).encode()).hexdigest()[:16]


def env_from_dict(raw: dict) -> Env:
    model_spec = dict(raw["model"])
    dbar_max = float(raw.get("dbar_max", 0.0))
    if model_spec["name"] == "unicycle" and "input_limit" not in model_spec:
        model_spec["input_limit"] = float(model_spec.get("omega_max", 1.0)) + dbar_max
    return Env(
        name=raw.get("name", model_spec["name"]),
        model=model_from_dict(model_spec),
        geometry=geometry_from_dict(raw["geometry"]),
        start=dict(raw["start"]),
        dbar_max=dbar_max,
        dt=float(raw.get("dt", 0.1)),
        substep=float(raw.get("substep", 0.05)),
        timeout=float(raw.get("timeout", 15.0)),
        grid_spec=tuple(raw["grid"]),
        solver=dict(raw.get("solver", {})),
        expert=dict(raw.get("expert", {})),
        raw=raw,
    )


def load_env(path) -> Env:
    with open(path) as fh:
        return env_from_dict(json.load(fh))


def with_overrides(env: Env, **changes) -> Env:
    """Copy of ``env`` with top-level JSON keys replaced (hash changes too)."""
    raw = json.loads(json.dumps(env.raw))
    raw.update(changes)
    return env_from_dict(raw)


# --- built-in configurations ------------------------------------------------

def unicycle_config() -> dict:
    return {
        "name": "unicycle-nav",
        "model": {"name": "unicycle", "v": 1.0, "omega_max": 1.0},
        "dbar_max": 0.6,
        "geometry": {
            "kind": "circles",
            "workspace": [[-5.0, 5.0], [-5.0, 5.0]],
            "obstacles": [
                {"center": [0.0, 1.5], "radius": 1.0},
                {"center": [-2.0, -1.5], "radius": 1.0},
                {"center": [2.5, -1.0], "radius": 0.8},
            ],
            "goal": {"center": [3.5, 3.5], "radius": 0.5},
        },
        "start": {"kind": "box_toward_goal", "low": [-4.5, -4.5], "high": [-3.0, -3.0],
                  "heading_spread": math.pi / 4},
        "dt": 0.1,
        "substep": 0.05,
        "timeout": 15.0,
        "grid": [
            {"lo": -5.2, "hi": 5.2, "n": 101, "periodic": False},
            {"lo": -5.2, "hi": 5.2, "n": 101, "periodic": False},
            {"lo": -math.pi, "hi": math.pi, "n": 101, "periodic": True},
        ],
        "solver": {"cfl": 0.5, "convergence_tol": 1e-4, "max_horizon": 10.0,
                   "dbar_levels": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6]},
        "expert": {"kind": "mpc", "w_obs": 1000.0},
    }


def taxi_config() -> dict:
    return {
        "name": "taxi-runway",
        "model": {"name": "taxi", "v": 5.0, "h": 5.0, "omega_max": 1.0},
        "dbar_max": 0.3,
        "geometry": {"kind": "runway", "half_width": 10.0, "length": 200.0},
        "start": {"kind": "runway", "px": [-6.0, 6.0], "theta": [-0.3, 0.3]},
        "dt": 0.1,
        "substep": 0.05,
        "timeout": 60.0,
        "grid": [
            {"lo": -12.0, "hi": 12.0, "n": 121, "periodic": False},
            {"lo": -10.0, "hi": 230.0, "n": 3, "periodic": True},
            {"lo": -math.pi, "hi": math.pi, "n": 101, "periodic": True},
        ],
        "solver": {"cfl": 0.5, "convergence_tol": 1e-4, "max_horizon": 10.0,
                   "dbar_levels": [0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3]},
        "expert": {"kind": "pid"},
    }


def integrator_config() -> dict:
    return {
        "name": "integrator-1d",
        "model": {"name": "integrator1d", "ubar": 1.0},
        "dbar_max": 0.5,
        "geometry": {"kind": "halfline", "goal_x": 3.5},
        "start": {"kind": "interval", "low": 1.0, "high": 2.0},
        "dt": 0.1,
        "substep": 0.05,
        "timeout": 10.0,
        "grid": [{"lo": 0.0, "hi": 4.0, "n": 201, "periodic": False}],
        "solver": {"cfl": 0.5, "convergence_tol": 1e-4, "max_horizon": 5.0, "dbar_levels": [0.0, 0.25, 0.5]},
        "expert": {"kind": "proportional", "gain": 1.0},
    }


BUILTIN_ENVS = {"unicycle": unicycle_config, "taxi": taxi_config, "integrator1d": integrator_config}
