import math

import numpy as np
import pytest

from safegil.bench import PolicyController, rollout
from safegil.envmodels import UnicycleModel
from safegil.gridcore import Axis, build_grid
from safegil.reach import ValueFunction, query_disturbance, query_safe_control, query_value
from safegil.shield import FilterConfig, SafetyFilter, filtered_action


def flat_vf(value):
    """Value ``value`` everywhere, rising with heading so the safe control is +1."""
    grid = build_grid([Axis(-5, 5, 11), Axis(-5, 5, 11), Axis(-math.pi, math.pi, 16, True)])
    f = grid.sample(lambda p: value + 1e-6 * (p[:, 2] + math.pi))
    return ValueFunction(grid, [0.0, 0.6], [f, f], model=UnicycleModel())


def test_pass_through_when_safe():
    u, engaged = filtered_action(flat_vf(2.0), [0.0, 0.0, 0.0], -0.37, FilterConfig(threshold=0.05))
    assert (u, engaged) == (-0.37, False)


def test_override_near_boundary():
    u, engaged = filtered_action(flat_vf(0.01), [0.0, 0.0, 0.0], -0.37, FilterConfig(threshold=0.05))
    assert (u, engaged) == (1.0, True)


def test_out_of_grid_is_engaged():
    u, engaged = filtered_action(flat_vf(2.0), [9.0, 0.0, 0.0], -0.37)
    assert engaged and u == 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        FilterConfig(threshold=-0.1)
    with pytest.raises(ValueError):
        FilterConfig(hysteresis=-1.0)
    with pytest.raises(ValueError):
        FilterConfig(lookahead=-0.1)


def test_hysteresis_holds_engagement():
    vf = flat_vf(0.08)
    cfg = FilterConfig(threshold=0.05, hysteresis=0.05, lookahead=0.0)
    assert filtered_action(vf, [0, 0, 0], 0.0, cfg, engaged_before=False)[1] is False
    assert filtered_action(vf, [0, 0, 0], 0.0, cfg, engaged_before=True)[1] is True


def test_engagement_monotone_in_threshold(coarse_uni, rng):
    _, vf = coarse_uni
    xs = rng.uniform([-4.5, -4.5, -math.pi], [4.5, 4.5, math.pi], size=(400, 3))
    prev = np.zeros(len(xs), dtype=bool)
    counts = []
    for eps in (0.0, 0.05, 0.2, 0.5, 1.0):
        now = np.array([filtered_action(vf, x, 0.0, FilterConfig(threshold=eps))[1] for x in xs])
        assert np.all(now >= prev)
        prev = now
        counts.append(int(now.sum()))
    assert 0 < counts[1] < len(xs)


def test_infinite_threshold_is_pure_safe_control(coarse_uni):
    env, vf = coarse_uni

    class Zero:
        def __call__(self, x):
            return 0.0

    pol = PolicyController(Zero(), SafetyFilter(vf, FilterConfig(threshold=math.inf)))
    x0 = np.array([-4.0, -4.0, 0.8])
    filtered = rollout(env, pol, x0, max_time=5.0)
    assert filtered.engaged.all()

    class Safe:
        engaged = False

        def __call__(self, x):
            return query_safe_control(vf, x)

    pure = rollout(env, Safe(), x0, max_time=5.0)
    assert np.array_equal(filtered.states, pure.states)


def test_lookahead_catches_fast_approach(uni_env, uni_vf):
    """Heading at the north wall, the current value alone clears the threshold but the next step does not."""
    x = np.array([1.1, 4.05, 1.685])
    cfg = FilterConfig(threshold=0.05, dbar=0.0)
    assert not filtered_action(uni_vf, x, 0.0, FilterConfig(threshold=0.05, dbar=0.0, lookahead=0.0))[1]
    assert filtered_action(uni_vf, x, 0.0, cfg)[1]


def test_filter_keeps_reckless_policy_safe(uni_env, uni_vf, rng):
    """Any policy behind the filter stays out of the failure set under bounded disturbance."""
    env, vf = uni_env, uni_vf
    cfg = FilterConfig()
    dbar = vf.dbar_max
    n = 0
    while n < 100:
        x0 = rng.uniform([-4.5, -4.5, -math.pi], [4.5, 4.5, math.pi])
        if query_value(vf, x0, dbar) < cfg.threshold + 2 * vf.spacing:
            continue
        n += 1
        turn = rng.choice([-1.0, 0.0, 1.0])

        class Reckless:
            def __call__(self, x, turn=turn):
                return turn

        pol = PolicyController(Reckless(), SafetyFilter(vf, cfg))
        res = rollout(env, pol, x0, disturbance=lambda x, u: query_disturbance(vf, x, dbar, clamp=True),
                      max_time=10.0)
        assert res.outcome != "collision"
