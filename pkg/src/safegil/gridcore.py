"""Rectilinear grids, multilinear interpolation and finite differences.

Node storage is row-major with the last axis varying fastest. Periodic axes
cover ``[lo, hi)`` with ``n`` distinct nodes; non-periodic axes cover
``[lo, hi]`` including both ends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np


class GridError(ValueError):
    pass


class OutOfBoundsError(GridError):
    """Query point lies outside a non-periodic axis."""

    def __init__(self, axis: int, coord: float, lo: float, hi: float):
        super().__init__(f"coordinate {coord!r} outside axis {axis} range [{lo}, {hi}]")
        self.axis = axis
        self.coord = coord


@dataclass(frozen=True)
class Axis:
    lo: float
    hi: float
    n: int
    periodic: bool = False

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise GridError(f"axis bounds must be finite, got [{self.lo}, {self.hi}]")
        if self.lo >= self.hi:
            raise GridError(f"axis requires lo < hi, got [{self.lo}, {self.hi}]")
        if int(self.n) != self.n or self.n < 3:
            raise GridError(f"axis needs at least 3 nodes, got {self.n}")

    @property
    def spacing(self) -> float:
        if self.periodic:
            return (self.hi - self.lo) / self.n
        return (self.hi - self.lo) / (self.n - 1)

    @property
    def period(self) -> float:
        return self.hi - self.lo

    def nodes(self) -> np.ndarray:
        return self.lo + self.spacing * np.arange(self.n)

    def wrap(self, x):
        """Map coordinates of a periodic axis into ``[lo, hi)``."""
        if not self.periodic:
            return x
        return self.lo + np.mod(np.asarray(x, dtype=float) - self.lo, self.period)

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "n": self.n, "periodic": self.periodic}


class Grid:
    """Immutable tensor-product grid over an ordered list of axes."""

    def __init__(self, axes: Sequence[Axis]):
        if len(axes) == 0:
            raise GridError("grid needs at least one axis")
        self.axes = tuple(axes)
        self.shape = tuple(int(a.n) for a in self.axes)
        self.ndim = len(self.axes)
        self.size = int(np.prod(self.shape))
        self.spacings = np.array([a.spacing for a in self.axes])
        self.lo = np.array([a.lo for a in self.axes])
        self.hi = np.array([a.hi for a in self.axes])
        self.periodic = np.array([a.periodic for a in self.axes])
        strides = [1] * self.ndim
        for i in range(self.ndim - 2, -1, -1):
            strides[i] = strides[i + 1] * self.shape[i + 1]
        self.strides = tuple(strides)

    def __eq__(self, other):
        return isinstance(other, Grid) and self.axes == other.axes

    def __hash__(self):
        return hash(self.axes)

    def __repr__(self):
        return f"Grid({list(self.axes)!r})"

    def flat_index(self, multi: Sequence[int]) -> int:
        return int(sum(int(m) * s for m, s in zip(multi, self.strides)))

    def multi_index(self, index: int) -> tuple[int, ...]:
        out = []
        for s, n in zip(self.strides, self.shape):
            out.append((int(index) // s) % n)
        return tuple(out)

    def node(self, index: int) -> np.ndarray:
        mi = self.multi_index(index)
        return self.lo + self.spacings * np.array(mi, dtype=float)

    def coordinates(self) -> list[np.ndarray]:
        return [a.nodes() for a in self.axes]

    def points(self) -> np.ndarray:
        """All node coordinates, shape ``(size, ndim)`` in storage order."""
        mesh = np.meshgrid(*self.coordinates(), indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def sample(self, fn) -> "Field":
        """Build a field from ``fn`` evaluated on the ``(size, ndim)`` node array."""
        return Field(self, np.asarray(fn(self.points()), dtype=float))

    def locate(self, x, clamp: bool = False):
        """Bracketing cell and fractional offsets for points ``x``.

        Returns ``(lower, upper, frac, clamped)`` where ``lower``/``upper`` are
        integer node indices per axis, shape ``(m, ndim)``. Raises
        :class:`OutOfBoundsError` unless ``clamp`` is set.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[-1] != self.ndim:
            raise GridError(f"expected points of dimension {self.ndim}, got {x.shape[-1]}")
        if not np.all(np.isfinite(x)):
            raise GridError("non-finite query point")
        m = x.shape[0]
        lower = np.empty((m, self.ndim), dtype=np.int64)
        upper = np.empty((m, self.ndim), dtype=np.int64)
        frac = np.empty((m, self.ndim))
        clamped = np.zeros(m, dtype=bool)
        for i, ax in enumerate(self.axes):
            xi = x[:, i]
            if ax.periodic:
                s = _snap((ax.wrap(xi) - ax.lo) / ax.spacing)
                k = np.floor(s).astype(np.int64)
                k = np.minimum(k, ax.n - 1)
                lower[:, i] = k
                upper[:, i] = (k + 1) % ax.n
                frac[:, i] = s - k
            else:
                out = (xi < ax.lo) | (xi > ax.hi)
                if np.any(out) and not clamp:
                    j = int(np.argmax(out))
                    raise OutOfBoundsError(i, float(xi[j]), ax.lo, ax.hi)
                clamped |= out
                s = _snap((np.clip(xi, ax.lo, ax.hi) - ax.lo) / ax.spacing)
                k = np.clip(np.floor(s).astype(np.int64), 0, ax.n - 2)
                lower[:, i] = k
                upper[:, i] = k + 1
                frac[:, i] = np.clip(s - k, 0.0, 1.0)
        return lower, upper, frac, clamped

    def to_dict(self) -> list[dict]:
        return [a.to_dict() for a in self.axes]

    @classmethod
    def from_dict(cls, spec: Sequence[dict]) -> "Grid":
        return build_grid([Axis(float(a["lo"]), float(a["hi"]), int(a["n"]), bool(a.get("periodic", False)))
                           for a in spec])


def _snap(s):
    """Round cell coordinates within 1e-9 cells of a node onto it, so node
    queries reproduce stored values exactly."""
    r = np.rint(s)
    return np.where(np.abs(s - r) < 1e-9, r, s)


def build_grid(axes: Sequence[Axis]) -> Grid:
    return Grid(axes)


def _interp_values(grid: Grid, values: np.ndarray, lower, upper, frac) -> np.ndarray:
    """Multilinear interpolation of an ``grid.shape`` array (optionally with
    trailing component axes) from precomputed brackets."""
    m = lower.shape[0]
    out = np.zeros((m,) + values.shape[grid.ndim:])
    for corner in range(1 << grid.ndim):
        w = np.ones(m)
        idx = []
        for i in range(grid.ndim):
            if (corner >> (grid.ndim - 1 - i)) & 1:
                w = w * frac[:, i]
                idx.append(upper[:, i])
            else:
                w = w * (1.0 - frac[:, i])
                idx.append(lower[:, i])
        v = values[tuple(idx)]
        out += w.reshape((m,) + (1,) * (v.ndim - 1)) * v
    return out


class Field:
    """Values sampled at every node of a grid. Read-only once built."""

    def __init__(self, grid: Grid, values):
        values = np.array(values, dtype=float).reshape(grid.shape)
        if not np.all(np.isfinite(values)):
            raise GridError("field values must be finite")
        values.flags.writeable = False
        self.grid = grid
        self.values = values

    def __add__(self, other: "Field") -> "Field":
        return Field(self.grid, self.values + other.values)

    def __mul__(self, scale: float) -> "Field":
        return Field(self.grid, self.values * scale)

    __rmul__ = __mul__

    @cached_property
    def node_gradient(self) -> np.ndarray:
        """Central differences at every node, one-sided at non-periodic ends.

        Shape ``grid.shape + (ndim,)``.
        """
        g = np.empty(self.grid.shape + (self.grid.ndim,))
        v = self.values
        for i, ax in enumerate(self.grid.axes):
            h = ax.spacing
            if ax.periodic:
                d = (np.roll(v, -1, axis=i) - np.roll(v, 1, axis=i)) / (2 * h)
            else:
                d = np.empty_like(v)
                sl = lambda a, b: tuple(slice(a, b) if k == i else slice(None) for k in range(v.ndim))  # noqa: E731
                d[sl(1, -1)] = (v[sl(2, None)] - v[sl(None, -2)]) / (2 * h)
                d[sl(0, 1)] = (v[sl(1, 2)] - v[sl(0, 1)]) / h
                d[sl(-1, None)] = (v[sl(-1, None)] - v[sl(-2, -1)]) / h
            g[..., i] = d
        g.flags.writeable = False
        return g


def interpolate_many(field: Field, x, clamp: bool = False):
    """Vectorized :func:`interpolate`: returns ``(values, clamped_mask)``."""
    lower, upper, frac, clamped = field.grid.locate(x, clamp=clamp)
    return _interp_values(field.grid, field.values, lower, upper, frac), clamped


def interpolate(field: Field, x, clamp: bool = False) -> float:
    """Multilinear interpolation of ``field`` at a single state ``x``.

    Periodic coordinates are wrapped. Points outside a non-periodic axis raise
    :class:`OutOfBoundsError` unless ``clamp`` is true, in which case the
    point is projected onto the grid box.
    """
    vals, _ = interpolate_many(field, x, clamp=clamp)
    return float(vals[0])


def gradient_many(field: Field, x, clamp: bool = False):
    lower, upper, frac, clamped = field.grid.locate(x, clamp=clamp)
    return _interp_values(field.grid, field.node_gradient, lower, upper, frac), clamped


def gradient_at(field: Field, x, clamp: bool = False) -> np.ndarray:
    """Node central differences multilinearly interpolated to ``x``."""
    g, _ = gradient_many(field, x, clamp=clamp)
    return g[0]


def upwind_derivatives(field: Field, index: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward first differences at one node, per axis.

    Non-periodic boundaries use a linearly extrapolated ghost node, so both
    one-sided differences there reduce to the inward difference.
    """
    grid = field.grid
    v = field.values.ravel()
    mi = grid.multi_index(index)
    left = np.empty(grid.ndim)
    right = np.empty(grid.ndim)
    center = v[index]
    for i, ax in enumerate(grid.axes):
        k, n, s, h = mi[i], ax.n, grid.strides[i], ax.spacing
        if ax.periodic:
            prev = v[index + (((k - 1) % n) - k) * s]
            nxt = v[index + (((k + 1) % n) - k) * s]
        else:
            prev = v[index - s] if k > 0 else 2 * center - v[index + s]
            nxt = v[index + s] if k < n - 1 else 2 * center - v[index - s]
        left[i] = (center - prev) / h
        right[i] = (nxt - center) / h
    return left, right
