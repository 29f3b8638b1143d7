import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shared import bench
from fdilab.attack import (AttackConfig, LimitedAttackPlan, lemma1_demo, perturb, perturb_limited,
                           random_plan, select_critical_meters)
from fdilab.models import train_pgae
from fdilab.nn import TrainConfig
from fdilab.scenario import ScenarioConfig, generate_timeseries


@pytest.fixture(scope="module")
def quick():
    ds = generate_timeseries(ScenarioConfig(n_samples=100, seed=2))
    return ds, train_pgae(ds, ds.case, config=TrainConfig(max_iterations=3))


def test_zero_offset_is_identity(quick):
    ds, model = quick
    Za = perturb(model, ds.Z, AttackConfig.uniform(model.d, 0.0))
    assert np.array_equal(Za, ds.Z)
    z = ds.Z[4]
    assert np.array_equal(perturb(model, z, AttackConfig.uniform(model.d, 0.0, 3.0)), z)


def test_dimension_mismatch(quick):
    ds, model = quick
    with pytest.raises(ValueError, match="latent dimension"):
        perturb(model, ds.Z, AttackConfig.uniform(model.d + 1))


def test_shift_depends_only_on_encoding(quick):
    ds, model = quick
    cfg = AttackConfig.uniform(model.d, 0.1)
    pair = np.vstack([ds.Z[7], ds.Z[7]])
    Za = perturb(model, pair, cfg)
    np.testing.assert_array_equal(Za[0] - pair[0], Za[1] - pair[1])
    # a single vector and the same row inside a batch get the same shift
    np.testing.assert_allclose(perturb(model, ds.Z[7], cfg), Za[0], rtol=0, atol=1e-13)


def test_gamma_scales_offset():
    cfg = AttackConfig((0.1, -0.2), gamma=3.0)
    np.testing.assert_allclose(cfg.offset, [0.3, -0.6])
    with pytest.raises(ValueError):
        AttackConfig((np.inf,))


def test_limited_all_channels_equals_full(quick):
    ds, model = quick
    cfg = AttackConfig.uniform(model.d, 0.1)
    plan = LimitedAttackPlan(tuple(range(model.m)))
    assert np.array_equal(perturb_limited(model, ds.Z, cfg, plan), perturb(model, ds.Z, cfg))


def test_limited_leaves_other_channels(quick):
    ds, model = quick
    plan = LimitedAttackPlan((0, 5, 9))
    Za = perturb_limited(model, ds.Z, AttackConfig.uniform(model.d, 0.1), plan)
    keep = np.setdiff1d(np.arange(model.m), plan.channels)
    assert np.array_equal(Za[:, keep], ds.Z[:, keep])
    assert not np.array_equal(Za[:, list(plan.channels)], ds.Z[:, list(plan.channels)])
    with pytest.raises(ValueError):
        perturb_limited(model, ds.Z, AttackConfig.uniform(model.d), LimitedAttackPlan((model.m,)))


@pytest.mark.parametrize("bad", [(), (1, 1), (-1, 2)])
def test_plan_invariants(bad):
    with pytest.raises(ValueError):
        LimitedAttackPlan(bad)


def test_select_critical_meters_examples():
    assert select_critical_meters([3, 1, 2], 2).channels == (1, 2)
    assert select_critical_meters([5.0] * 6, 3).channels == (0, 1, 2)
    assert select_critical_meters([4, 2, 9, 1], 4).channels == (0, 1, 2, 3)
    with pytest.raises(ValueError):
        select_critical_meters([1, 2], 3)


@settings(max_examples=50, deadline=None)
@given(prof=st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=20),
       data=st.data())
def test_selection_is_smallest_set(prof, data):
    m0 = data.draw(st.integers(1, len(prof)))
    chosen = select_critical_meters(prof, m0).channels
    assert len(chosen) == m0
    rest = [prof[i] for i in range(len(prof)) if i not in chosen]
    if rest:
        assert max(prof[i] for i in chosen) <= min(rest)


def test_random_plan_valid():
    plan = random_plan(14, 10, np.random.default_rng(0))
    assert plan.m0 == 10 and all(0 <= i < 14 for i in plan.channels)


def test_lemma1_witness():
    rep = lemma1_demo()
    assert rep.output == -1.0
    assert rep.distance == 1.0 and not rep.on_manifold
    assert rep.reconstruction_error < 1e-12


def test_lemma1_unperturbed_and_positive_shift():
    rep = lemma1_demo(4.0, 0.0)
    assert rep.output == pytest.approx(4.0, rel=1e-14) and rep.distance == 0.0
    c = -np.cbrt(9.0) / 2
    rep = lemma1_demo(9.0, c)
    assert rep.output == pytest.approx(9.0 / 8.0, rel=1e-14) and rep.on_manifold


@pytest.mark.slow
def test_state_shift_mirrors_offset():
    """WLS estimates under attack move by about gamma*c in both coordinate classes."""
    b = bench()
    ds = b.dataset()
    model = b.pgae(0)
    est = b.estimator(ds)
    Za = perturb(model, ds.Z, AttackConfig.uniform(model.d, 0.1))
    x0 = est.residuals(ds.Z).x
    xa = est.residuals(Za).x
    shift = np.mean(xa - x0, axis=0)
    nf = est.nf
    for block in (shift[:nf], shift[nf:]):
        assert 0.05 <= np.mean(np.abs(block)) <= 0.15
