import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from safegil.envmodels import BUILTIN_ENVS, env_from_dict  # noqa: E402
from safegil.reach import SolverParams, solve_env  # noqa: E402


def _solve(env, params=None):
    t0 = time.perf_counter()
    vf = solve_env(env, params)
    return vf, time.perf_counter() - t0


@pytest.fixture(scope="session")
def uni_env():
    return env_from_dict(BUILTIN_ENVS["unicycle"]())


@pytest.fixture(scope="session")
def taxi_env():
    return env_from_dict(BUILTIN_ENVS["taxi"]())


@pytest.fixture(scope="session")
def line_env():
    return env_from_dict(BUILTIN_ENVS["integrator1d"]())


@pytest.fixture(scope="session")
def line_vf(line_env):
    return solve_env(line_env)


@pytest.fixture(scope="session")
def coarse_uni():
    """A 41x41x41 unicycle solve: cheap enough for unit tests."""
    raw = BUILTIN_ENVS["unicycle"]()
    raw["grid"] = [dict(a, n=41) for a in raw["grid"]]
    env = env_from_dict(raw)
    return env, solve_env(env, SolverParams(max_horizon=6.0))


@pytest.fixture(scope="session")
def uni_solve(uni_env):
    """Full-resolution unicycle solve and its wall time (seconds)."""
    solve_env(env_from_dict(BUILTIN_ENVS["integrator1d"]()))  # compile kernels before timing
    return _solve(uni_env)


@pytest.fixture(scope="session")
def uni_vf(uni_solve):
    return uni_solve[0]


@pytest.fixture(scope="session")
def taxi_vf(taxi_env):
    return solve_env(taxi_env)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_CRITERIA: dict = {}


@pytest.fixture(scope="session")
def criterion():
    """Record ``(passed, detail)`` for an acceptance criterion; printed after the run."""
    def record(n: int, passed: bool, detail: str):
        _CRITERIA[n] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        passed, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'} - {detail}")
