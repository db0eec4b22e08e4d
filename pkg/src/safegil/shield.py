"""Least-restrictive safety filter built on the solved value function.

The learned action passes through unchanged while the safety value stays
above a threshold, both now and one hold period ahead; otherwise the
optimal safe control replaces it. States outside the grid are treated as
unsafe.

The defaults are sized for sampled-data control on a discrete grid: the
lookahead covers the value lost while an action is held, and the threshold
of about two grid cells covers the solver's optimism near the tube boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

from .envmodels import step_rk4
from .gridcore import OutOfBoundsError
from .reach import ValueFunction, query_disturbance, query_safe_control, query_value


@dataclass(frozen=True)
class FilterConfig:
    threshold: float = 0.2
    dbar: float | None = None  # defaults to the largest solved level
    hysteresis: float = 0.0
    lookahead: float = 0.1  # seconds the policy action is predicted forward; 0 checks only the current state

    def __post_init__(self):
        if not self.threshold >= 0:
            raise ValueError("threshold must be non-negative")
        if self.hysteresis < 0 or self.lookahead < 0:
            raise ValueError("hysteresis and lookahead must be non-negative")


def _predicted_value(vf: ValueFunction, x, u_policy: float, dbar: float, horizon: float) -> float:
    """Value after holding ``u_policy`` for ``horizon`` against the worst-case disturbance."""
    d = query_disturbance(vf, x, dbar)
    return query_value(vf, step_rk4(vf.model, x, u_policy, d, horizon), dbar)


def filtered_action(vf: ValueFunction, x, u_policy: float, cfg: FilterConfig = FilterConfig(),
                    engaged_before: bool = False) -> tuple[float, bool]:
    """Return ``(u, engaged)``.

    With a hysteresis margin, a filter that engaged on the previous step
    stays engaged until the value exceeds ``threshold + hysteresis``.
    """
    dbar = vf.dbar_max if cfg.dbar is None else cfg.dbar
    try:
        v = query_value(vf, x, dbar)
        if cfg.lookahead > 0:
            v = min(v, _predicted_value(vf, x, u_policy, dbar, cfg.lookahead))
    except OutOfBoundsError:
        return query_safe_control(vf, x, dbar, clamp=True), True
    limit = cfg.threshold + (cfg.hysteresis if engaged_before else 0.0)
    if v > limit:
        return float(u_policy), False
    return query_safe_control(vf, x, dbar), True


class SafetyFilter:
    """Stateful wrapper that tracks engagement for hysteresis and counting."""

    def __init__(self, vf: ValueFunction, cfg: FilterConfig = FilterConfig()):
        self.vf = vf
        self.cfg = cfg
        self.engaged = False
        self.engagements = 0

    def reset(self):
        self.engaged = False
        self.engagements = 0

    def __call__(self, x, u_policy: float) -> float:
        u, self.engaged = filtered_action(self.vf, x, u_policy, self.cfg, self.engaged)
        self.engagements += int(self.engaged)
        return u
