"""Grid solver for the reach-avoid style HJI variational inequality.

The value function is evolved in backward time from ``V = l`` with a
first-order Lax-Friedrichs scheme and two-stage TVD Runge-Kutta, clamping
``V <= l`` after every stage. Disturbance-bound conditioning is carried as a
set of slices that share one time grid, which is exactly what an extra
zero-dynamics state axis would produce.
"""

from __future__ import annotations

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from numba import njit

from .gridcore import Field, Grid, gradient_many, interpolate_many

log = logging.getLogger(__name__)


class DbarClampWarning(UserWarning):
    """A disturbance bound outside the solved range was clamped."""


@dataclass
class SolverParams:
    cfl: float = 0.5
    convergence_tol: float = 1e-4
    max_horizon: float = 10.0
    dbar_levels: list = field(default_factory=lambda: [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6])

    def __post_init__(self):
        if not (0 < self.cfl <= 1):
            raise ValueError("cfl must lie in (0, 1]")
        if self.convergence_tol <= 0 or self.max_horizon <= 0:
            raise ValueError("tolerance and horizon must be positive")
        levels = [float(d) for d in self.dbar_levels]
        if not levels or any(b < a for a, b in zip(levels, levels[1:])) or levels[0] < 0:
            raise ValueError("dbar_levels must be non-empty, non-negative and sorted")
        self.dbar_levels = levels

    @classmethod
    def from_dict(cls, d: dict) -> "SolverParams":
        return cls(**{k: d[k] for k in ("cfl", "convergence_tol", "max_horizon", "dbar_levels") if k in d})


def _neighbour_tables(n: int, periodic: bool):
    """Neighbour indices along one axis plus ghost coefficients.

    A neighbour value is reconstructed as ``s * v[idx] + g * c``: ``(1, 0)``
    for a real node, ``(-1, 2)`` for a linearly extrapolated ghost mirrored
    through the centre ``c``. Length-one axes get zero differences.
    """
    idx = np.arange(n)
    lo, hi = idx - 1, idx + 1
    s_lo, s_hi = np.ones(n), np.ones(n)
    g_lo, g_hi = np.zeros(n), np.zeros(n)
    if n == 1:
        return idx.copy(), idx.copy(), s_lo, s_hi, g_lo, g_hi
    if periodic:
        lo[0], hi[-1] = n - 1, 0
    else:
        lo[0], s_lo[0], g_lo[0] = 1, -1.0, 2.0
        hi[-1], s_hi[-1], g_hi[-1] = n - 2, -1.0, 2.0
    return lo, hi, s_lo, s_hi, g_lo, g_hi


@njit(cache=True, nogil=True)
def _node_general(v, l, fixed, b0, b1, b2, gain, alpha, inv_h, t0, t1, t2, dt, i, j, k):
    """Update of one node through the neighbour tables (boundaries, small grids)."""
    if fixed[i, j, k]:
        return l[i, j, k]
    c = v[i, j, k]
    ham = 0.0
    for ax in range(3):
        t = t0 if ax == 0 else (t1 if ax == 1 else t2)
        lo, hi, sl, sh, gl, gh = t
        m = i if ax == 0 else (j if ax == 1 else k)
        if ax == 0:
            a, b, e = v[lo[m], j, k], v[hi[m], j, k], b0[i, j, k]
        elif ax == 1:
            a, b, e = v[i, lo[m], k], v[i, hi[m], k], b1[i, j, k]
        else:
            a, b, e = v[i, j, lo[m]], v[i, j, hi[m]], b2[i, j, k]
        a = sl[m] * a + gl[m] * c
        b = sh[m] * b + gh[m] * c
        pa = 0.5 * inv_h[ax] * (b - a)
        ham += e * pa + gain[ax] * abs(pa) + 0.5 * alpha[ax] * inv_h[ax] * (b - 2.0 * c + a)
    nv = c + dt * ham
    lv = l[i, j, k]
    return lv if nv > lv else nv


@njit(cache=True, nogil=True, fastmath=True)
def _lf_stage(v, l, fixed, b0, b1, b2, gain, alpha, inv_h, t0, t1, t2, dt, out):
    """One forward-Euler stage in backward time, clamped to ``l``.

    Arrays are 3-D; unused leading axes have length one. Nodes with
    ``fixed == 1`` hold their target value. Interior nodes take a
    direct-indexed path; everything else goes through the neighbour tables.
    """
    n0, n1, n2 = v.shape
    h0, h1, h2 = inv_h[0], inv_h[1], inv_h[2]
    c0, c1, c2 = gain[0], gain[1], gain[2]
    d0, d1, d2 = 0.5 * alpha[0] * h0, 0.5 * alpha[1] * h1, 0.5 * alpha[2] * h2
    for i in range(n0):
        for j in range(n1):
            inner = 0 < i < n0 - 1 and 0 < j < n1 - 1 and n2 > 2
            if not inner:
                for k in range(n2):
                    out[i, j, k] = _node_general(v, l, fixed, b0, b1, b2, gain, alpha, inv_h,
                                                 t0, t1, t2, dt, i, j, k)
                continue
            for k in (0, n2 - 1):
                out[i, j, k] = _node_general(v, l, fixed, b0, b1, b2, gain, alpha, inv_h,
                                             t0, t1, t2, dt, i, j, k)
            for k in range(1, n2 - 1):
                c = v[i, j, k]
                a = v[i - 1, j, k]
                b = v[i + 1, j, k]
                pa = 0.5 * h0 * (b - a)
                ham = b0[i, j, k] * pa + c0 * abs(pa) + d0 * (b - 2.0 * c + a)
                a = v[i, j - 1, k]
                b = v[i, j + 1, k]
                pa = 0.5 * h1 * (b - a)
                ham += b1[i, j, k] * pa + c1 * abs(pa) + d1 * (b - 2.0 * c + a)
                a = v[i, j, k - 1]
                b = v[i, j, k + 1]
                pa = 0.5 * h2 * (b - a)
                ham += b2[i, j, k] * pa + c2 * abs(pa) + d2 * (b - 2.0 * c + a)
                nv = c + dt * ham
                lv = l[i, j, k]
                nv = lv if nv > lv else nv
                out[i, j, k] = lv if fixed[i, j, k] else nv


@njit(cache=True, nogil=True, fastmath=True)
def _rk2_combine(v0, v2, l, out):
    """``out = min((v0 + v2) / 2, l)``; returns max |out - v0| and max increase."""
    n0, n1, n2 = v0.shape
    change = 0.0
    rise = -np.inf
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                nv = 0.5 * (v0[i, j, k] + v2[i, j, k])
                if nv > l[i, j, k]:
                    nv = l[i, j, k]
                d = nv - v0[i, j, k]
                if d > rise:
                    rise = d
                if abs(d) > change:
                    change = abs(d)
                out[i, j, k] = nv
    return change, rise


def _as3d(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.reshape((1,) * (3 - a.ndim) + a.shape))


def _pad3(vec, fill) -> np.ndarray:
    vec = list(vec)
    return np.array([fill] * (3 - len(vec)) + vec)


def _boundary_failure_mask(grid: Grid, l: np.ndarray) -> np.ndarray:
    """Non-periodic boundary nodes lying strictly inside the failure set.

    These hold ``V = l``: an extrapolated ghost node there is not monotone
    when characteristics leave the grid, and values would drift without bound.
    """
    face = np.zeros(grid.shape, dtype=bool)
    for i, ax in enumerate(grid.axes):
        if ax.periodic:
            continue
        idx = [slice(None)] * grid.ndim
        idx[i] = 0
        face[tuple(idx)] = True
        idx[i] = -1
        face[tuple(idx)] = True
    return (face & (l < 0)).astype(np.uint8)


class ValueFunction:
    """Converged value samples over a state grid, one slice per disturbance bound."""

    def __init__(self, grid: Grid, dbar_levels, slices, model=None, metadata=None):
        self.grid = grid
        self.dbar_levels = np.asarray(dbar_levels, dtype=float)
        self.slices = list(slices)
        if len(self.slices) != len(self.dbar_levels):
            raise ValueError("one slice per disturbance level required")
        self.model = model
        self.metadata = dict(metadata or {})
        self.wall_time = None

    @property
    def converged(self) -> bool:
        return bool(self.metadata.get("converged", True))

    @property
    def dbar_max(self) -> float:
        return float(self.dbar_levels[-1])

    @property
    def spacing(self) -> float:
        return float(np.max(self.grid.spacings))

    def bracket(self, dbar: float):
        """Slice indices and weight for linear interpolation in ``dbar``."""
        levels = self.dbar_levels
        if dbar < levels[0] - 1e-12 or dbar > levels[-1] + 1e-12:
            warnings.warn(f"dbar {dbar} outside solved range [{levels[0]}, {levels[-1]}]; clamped",
                          DbarClampWarning, stacklevel=3)
        dbar = min(max(dbar, levels[0]), levels[-1])
        if len(levels) == 1:
            return 0, 0, 0.0
        j = int(np.searchsorted(levels, dbar, side="right")) - 1
        j = min(max(j, 0), len(levels) - 2)
        lo, hi = levels[j], levels[j + 1]
        w = 0.0 if hi == lo else (dbar - lo) / (hi - lo)
        if w >= 1.0:
            return j + 1, j + 1, 0.0
        return j, j + 1, float(w)

    def slice_at(self, dbar: float) -> Field:
        i, j, w = self.bracket(dbar)
        if w == 0.0:
            return self.slices[i]
        return (1 - w) * self.slices[i] + w * self.slices[j]

    def values(self) -> np.ndarray:
        """Stacked payload, shape ``(levels,) + grid.shape``."""
        return np.stack([s.values for s in self.slices])


def solve_hji(grid: Grid, model, target, params: SolverParams | None = None, *,
              workers: int = 1, metadata: dict | None = None) -> ValueFunction:
    """Evolve every disturbance slice to convergence (or ``max_horizon``).

    ``target`` is the vectorized target function ``l`` over ``(m, ndim)``
    points. The returned function carries ``metadata["converged"]`` and the
    backward horizon reached.
    """
    params = params or SolverParams()
    if grid.ndim > 3:
        raise ValueError("solver supports up to three state dimensions")
    t0 = time.perf_counter()
    pts = grid.points()
    l = np.asarray(target(pts), dtype=float).reshape(grid.shape)
    l3 = _as3d(l)
    fixed = _as3d(_boundary_failure_mask(grid, l))
    inv_h = _pad3(1.0 / grid.spacings, 1.0)
    shape3 = l3.shape
    periodic3 = _pad3(grid.periodic, False)
    tables = [_neighbour_tables(shape3[ax], bool(periodic3[ax])) for ax in range(3)]

    levels = params.dbar_levels
    terms = []
    alpha_max = np.zeros(3)
    for dbar in levels:
        drift, gain = model.hamiltonian_terms(pts, dbar)
        b = [np.zeros_like(l3)] * (3 - grid.ndim) + [_as3d(drift[:, i].reshape(grid.shape))
                                                     for i in range(grid.ndim)]
        g = _pad3(gain, 0.0)
        alpha = _pad3(np.max(np.abs(drift), axis=0), 0.0) + np.abs(g)
        alpha_max = np.maximum(alpha_max, alpha)
        terms.append((b, g))
    del pts

    rate = float(np.sum(alpha_max * inv_h * (_pad3(grid.shape, 1) > 1)))
    dt = params.cfl / rate if rate > 0 else params.max_horizon
    dt = min(dt, params.max_horizon)

    state = [l3.copy() for _ in levels]
    scratch = [(np.empty_like(l3), np.empty_like(l3)) for _ in levels]
    done = [False] * len(levels)
    max_increase = [-np.inf] * len(levels)

    def advance(s: int, h: float) -> float:
        v0 = state[s]
        v1, v2 = scratch[s]
        (b0, b1, b2), g = terms[s]
        _lf_stage(v0, l3, fixed, b0, b1, b2, g, alpha_max, inv_h, *tables, h, v1)
        _lf_stage(v1, l3, fixed, b0, b1, b2, g, alpha_max, inv_h, *tables, h, v2)
        change, rise = _rk2_combine(v0, v2, l3, v1)
        max_increase[s] = max(max_increase[s], rise)
        state[s], scratch[s] = v1, (v0, v2)
        return change / h

    tau = 0.0
    steps = 0
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        while tau < params.max_horizon - 1e-12:
            h = min(dt, params.max_horizon - tau)  # land exactly on the horizon
            if pool is None:
                rates = [advance(s, h) for s in range(len(levels))]
            else:
                rates = list(pool.map(lambda s: advance(s, h), range(len(levels))))
            tau += h
            steps += 1
            for s, r in enumerate(rates):
                done[s] = r < params.convergence_tol
            if all(done):
                break
    finally:
        if pool is not None:
            pool.shutdown()

    converged = all(done)
    elapsed = time.perf_counter() - t0
    log.info("solve: %d steps, horizon %.3f s, converged=%s, %.1f s wall", steps, tau, converged, elapsed)
    meta = {
        "model": model.to_dict(),
        "solver": asdict(params),
        "converged": converged,
        "horizon": tau,
        "steps": steps,
        "dt": dt,
        "max_increase": float(max(max_increase)),
    }
    meta.update(metadata or {})
    slices = [Field(grid, s.reshape(grid.shape)) for s in state]
    vf = ValueFunction(grid, levels, slices, model=model, metadata=meta)
    vf.wall_time = elapsed  # kept out of the metadata so saved files are reproducible
    return vf


class EnvMismatchError(ValueError):
    """A value function is used with an environment it was not solved for."""


def check_env_match(vf: ValueFunction, env) -> None:
    h = vf.metadata.get("env_hash")
    if h is not None and h != env.hash:
        raise EnvMismatchError(f"value function hash {h} does not match environment hash {env.hash}")


def solve_env(env, params: SolverParams | None = None, workers: int = 1) -> ValueFunction:
    params = params or SolverParams.from_dict(env.solver)
    return solve_hji(env.grid(), env.model, env.target, params, workers=workers,
                     metadata={"env_hash": env.hash, "env_name": env.name})


def _slice_weights(vf: ValueFunction, dbar: float):
    i, j, w = vf.bracket(dbar)
    return [(i, 1.0 - w)] + ([(j, w)] if w > 0 else [])


def query_values(vf: ValueFunction, xs, dbar: float, clamp: bool = False) -> np.ndarray:
    out = None
    for idx, w in _slice_weights(vf, dbar):
        v, _ = interpolate_many(vf.slices[idx], xs, clamp=clamp)
        out = w * v if out is None else out + w * v
    return out


def query_value(vf: ValueFunction, x, dbar: float, clamp: bool = False) -> float:
    """Interpolated ``V(x; dbar)``: multilinear in state, linear in ``dbar``."""
    return float(query_values(vf, x, dbar, clamp=clamp)[0])


def query_gradient(vf: ValueFunction, x, dbar: float, clamp: bool = False) -> np.ndarray:
    out = None
    for idx, w in _slice_weights(vf, dbar):
        g, _ = gradient_many(vf.slices[idx], x, clamp=clamp)
        out = w * g[0] if out is None else out + w * g[0]
    return out


def query_disturbance(vf: ValueFunction, x, dbar: float, clamp: bool = False) -> float:
    """Worst-case disturbance of magnitude ``dbar`` at ``x``."""
    p = query_gradient(vf, x, dbar, clamp=clamp)
    return vf.model.optimal_disturbance(x, p, dbar)


def query_safe_control(vf: ValueFunction, x, dbar: float | None = None, clamp: bool = False) -> float:
    """Safety-maximizing control from the most robust slice (or ``dbar``)."""
    dbar = vf.dbar_max if dbar is None else dbar
    p = query_gradient(vf, x, dbar, clamp=clamp)
    return vf.model.optimal_control(x, p)


def brt_membership(vf: ValueFunction, x, dbar: float, clamp: bool = False) -> bool:
    return query_value(vf, x, dbar, clamp=clamp) <= 0.0


def bellman_residuals(vf: ValueFunction, nodes, dbar_index: int, dt: float, target=None) -> np.ndarray:
    """``|V(x) - max_u min_d V(x + dt g(x, u, d))|`` at the given node indices.

    ``u`` and ``d`` range over ``{-bound, 0, +bound}``. With ``target`` the
    backed-up value is first capped by ``l(x)``, as in the solved equation.
    """
    model = vf.model
    grid = vf.grid
    dbar = float(vf.dbar_levels[dbar_index])
    fld = vf.slices[dbar_index]
    ub = model.omega_max
    xs = np.array([grid.node(int(i)) for i in nodes])
    v0 = fld.values.ravel()[np.asarray(nodes)]
    best = np.full(len(xs), -np.inf)
    for u in (-ub, 0.0, ub):
        worst = np.full(len(xs), np.inf)
        for d in (-dbar, 0.0, dbar):
            nxt = xs + dt * model.flow(xs, u, d)
            val, _ = interpolate_many(fld, nxt, clamp=True)
            worst = np.minimum(worst, val)
        best = np.maximum(best, worst)
    if target is not None:
        best = np.minimum(best, np.asarray(target(xs), dtype=float))
    return np.abs(v0 - best)
