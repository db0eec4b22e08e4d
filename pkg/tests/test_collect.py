import math

import numpy as np
import pytest

from safegil.collect import (
    CollectionPlan,
    Dataset,
    DemoRecord,
    collect,
    collect_bc,
    collect_noise,
    collect_safegil,
    dagger_collect,
    dart_collect,
    merge,
    truncated_normal,
)
from safegil.envmodels import BUILTIN_ENVS, env_from_dict, with_overrides
from safegil.experts import make_expert
from safegil.policy import TrainConfig, train_on_dataset
from safegil.reach import EnvMismatchError, solve_env


class OffsetPolicy:
    """Stand-in learner that misses the expert by a fixed amount."""

    def __init__(self, expert, offset):
        self.expert, self.offset = expert, offset

    def predict(self, X):
        return np.array([self.expert(x) for x in X]) + self.offset

    def __call__(self, x):
        return float(self.expert(x) + self.offset)


@pytest.fixture(scope="module")
def line():
    env = env_from_dict(BUILTIN_ENVS["integrator1d"]())
    return env, make_expert(env), solve_env(env)


def test_bc_applies_expert_action(line):
    env, expert, _ = line
    ds = collect_bc(env, expert, CollectionPlan("bc", K=7, seed=3))
    assert all(r.u_applied == r.u_expert and r.dbar == 0.0 for r in ds.records)
    assert ds.demo_ids == list(range(7))
    assert all(math.isnan(r.v_safe) for r in ds.records)
    ds.validate()


def test_safegil_zero_bound_equals_bc(line):
    env, expert, vf = line
    a = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=6, seed=11, dbar_max=0.0))
    b = collect_bc(env, expert, CollectionPlan("bc", K=6, seed=11), vf=vf)
    assert a.records == b.records


def test_safegil_perturbation_bounded(line):
    env, expert, vf = line
    ds = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=10, seed=0))
    dev = np.array([r.u_applied - r.u_expert for r in ds.records])
    dbar = np.array([r.dbar for r in ds.records])
    assert np.all(np.abs(dev) <= dbar + 1e-12)
    assert np.all((dbar >= 0) & (dbar <= env.dbar_max))
    assert np.all(np.abs(ds.labels) <= env.model.omega_max)
    # on x' = u + d with l(x) = x the adversary always pushes left
    assert np.all(dev <= 0) and dev.min() < -0.1


def test_safegil_labels_are_clean_expert_actions(line):
    env, expert, vf = line
    ds = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=5, seed=2))
    for r in ds.records:
        assert r.u_expert == expert(r.x)


def test_safegil_checks_value_function(line):
    env, expert, vf = line
    with pytest.raises(ValueError):
        collect_safegil(env, expert, None, CollectionPlan("safegil", K=1))
    with pytest.raises(ValueError):
        collect_safegil(env, expert, vf, CollectionPlan("safegil", K=1, dbar_max=0.9))
    other = with_overrides(env, dbar_max=0.4)
    with pytest.raises(EnvMismatchError):
        collect_safegil(other, make_expert(other), vf, CollectionPlan("safegil", K=1))


def test_prefix_collection_is_nested(line):
    env, expert, vf = line
    big = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=8, seed=5))
    small = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=3, seed=5))
    assert big.subset(3).records == small.records


def test_collection_reproducible(line):
    env, expert, vf = line
    plan = CollectionPlan("uniform", K=4, seed=9, sigma=0.3)
    assert collect_noise(env, expert, plan).records == collect_noise(env, expert, plan).records


def test_zero_sigma_noise_equals_bc(line):
    env, expert, _ = line
    bc = collect_bc(env, expert, CollectionPlan("bc", K=5, seed=4))
    for kind in ("gauss", "uniform"):
        ds = collect_noise(env, expert, CollectionPlan(kind, K=5, seed=4, sigma=0.0))
        assert [(r.x.tolist(), r.u_applied) for r in ds.records] == [(r.x.tolist(), r.u_applied) for r in bc.records]


def test_noise_laws(line):
    env, expert, _ = line
    uni = collect_noise(env, expert, CollectionPlan("uniform", K=600, seed=1, sigma=0.3))
    d = np.array([r.u_applied - r.u_expert for r in uni.records])
    assert len(d) >= 10_000
    assert abs(d.mean()) < 3 * d.std() / math.sqrt(len(d))
    gauss = collect_noise(env, expert, CollectionPlan("gauss", K=50, seed=1, sigma=2.0))
    g = np.array([r.u_applied - r.u_expert for r in gauss.records])
    assert np.all(np.abs(g) <= env.dbar_max)


def test_truncated_normal_degenerate():
    rng = np.random.default_rng(0)
    assert truncated_normal(rng, 0.0, 1.0) == 0.0
    assert truncated_normal(rng, 1.0, 0.0) == 0.0


def test_dart_perfect_learner_injects_nothing(line):
    env, expert, _ = line
    ds = dart_collect(env, expert, CollectionPlan("dart", K=6, seed=2), lambda d: OffsetPolicy(expert, 0.0))
    assert ds.provenance["dart_variances"] == [0.0, 0.0, 0.0]
    assert all(r.u_applied == r.u_expert for r in ds.records)


def test_dart_zero_alpha_equals_bc(line):
    env, expert, _ = line
    ds = dart_collect(env, expert, CollectionPlan("dart", K=6, seed=2, dart_alpha=0.0),
                      lambda d: OffsetPolicy(expert, 0.2))
    bc = collect_bc(env, expert, CollectionPlan("bc", K=6, seed=2))
    assert ds.records == bc.records


def test_dart_noise_variance_matches_estimate(line):
    env, expert, _ = line
    plan = CollectionPlan("dart", K=1200, seed=0, dart_iterations=2)
    ds = dart_collect(env, expert, plan, lambda d: OffsetPolicy(expert, 0.1))
    sigma2 = ds.provenance["dart_variances"][1]
    assert sigma2 == pytest.approx(0.01)
    late = [r for r in ds.records if r.demo_id >= 600]
    d = np.array([r.u_applied - r.u_expert for r in late])
    assert len(d) >= 10_000
    assert abs(d.var() / sigma2 - 1.0) < 0.2


def test_dagger_single_iteration_degenerates(line):
    env, expert, vf = line
    bc = collect_bc(env, expert, CollectionPlan("bc", K=4, seed=6), vf=vf)
    dg = dagger_collect(env, expert, CollectionPlan("dagger", K=4, seed=6, dagger_iterations=1), None, vf=vf)
    assert dg.records == bc.records
    sg = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=4, seed=6))
    dsg = dagger_collect(env, expert, CollectionPlan("dagger_safegil", K=4, seed=6, dagger_iterations=1), None,
                         inject_safegil=True, vf=vf)
    assert dsg.records == sg.records


def test_dagger_later_tranches_follow_learner(line):
    env, expert, _ = line
    cfg = TrainConfig(hidden=(8,), epochs=20)
    trained = []

    def train_fn(ds):
        trained.append(train_on_dataset(ds, env, cfg))
        return trained[-1]

    ds = dagger_collect(env, expert, CollectionPlan("dagger", K=6, seed=1), train_fn)
    assert len(trained) == 2
    tranche2 = [r for r in ds.records if r.demo_id >= 4]
    for r in tranche2:
        assert r.u_applied == trained[1](r.x)
        assert r.u_expert == expert(r.x)
    assert any(r.u_applied != r.u_expert for r in tranche2)


def test_dispatch_requires_train_fn(line):
    env, expert, _ = line
    with pytest.raises(ValueError):
        collect(env, expert, CollectionPlan("dart", K=2))
    with pytest.raises(ValueError):
        CollectionPlan("mixup")
    with pytest.raises(ValueError):
        CollectionPlan("bc", K=0)


def test_validate_catches_bad_datasets():
    x = np.zeros(1)
    gap = Dataset([DemoRecord(0, 0.0, x, 0, 0, 0), DemoRecord(2, 0.0, x, 0, 0, 0)])
    with pytest.raises(ValueError):
        gap.validate()
    stale = Dataset([DemoRecord(0, 0.1, x, 0, 0, 0), DemoRecord(0, 0.1, x, 0, 0, 0)])
    with pytest.raises(ValueError):
        stale.validate()
    ok = merge([Dataset([DemoRecord(1, 0.0, x, 0, 0, 0)]), Dataset([DemoRecord(0, 0.0, x, 0, 0, 0)])], {})
    assert ok.demo_ids == [0, 1]
    ok.validate()


def test_safegil_lowers_dataset_safety_values(coarse_uni):
    """Adversarial guidance pulls demonstrations toward the failure set."""
    env, vf = coarse_uni
    expert = make_expert(env)
    sg, bc = [], []
    for seed in range(5):
        a = collect_safegil(env, expert, vf, CollectionPlan("safegil", K=10, seed=seed))
        b = collect_bc(env, expert, CollectionPlan("bc", K=10, seed=seed), vf=vf)
        sg.append(np.mean([r.v_safe for r in a.records]))
        bc.append(np.mean([r.v_safe for r in b.records]))
    assert np.mean(sg) < np.mean(bc)
