from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spar.anchor import Stage1Config, train_stage1
from spar.diagnostics import (guidance_update, measure_conflict, residual_geometry_summary,
                              support_distance_ratio, target_update_probe)
from spar.envs import generate_dataset, make_env
from spar.nn import make_rng
from spar.residual import MlpTrainer, ProjTrainer


def test_unguided_step_has_no_damage(small_world):
    _, ds, bundle, s2 = small_world
    tr = MlpTrainer(bundle, ds, replace(s2, variant="mlp", lambda_g=0.0))
    tr.run(5)
    r = measure_conflict(tr, seed=1)
    assert r.dd == 0.0 and r.vsd == 0.0


class FitAligned(MlpTrainer):
    """Guidance that points along the fit gradient itself."""

    def guide_loss_and_grad(self, idx, params=None, rng=None):
        return self.fit_loss_and_grad(idx, params)


def test_fit_aligned_step_has_negative_damage(small_world):
    _, ds, bundle, s2 = small_world
    tr = FitAligned(bundle, ds, replace(s2, variant="mlp"))
    tr.run(5)
    idx = np.arange(16)
    _, g = tr.fit_loss_and_grad(idx)
    delta = guidance_update(tr, g)
    assert np.dot(g, delta) < 0
    r = measure_conflict(tr, idx=idx, seed=2)
    assert r.dd < 0 and r.vsd < 0


def test_sgd_identity_for_inner_product():
    g = make_rng(0).normal(size=50)
    eta = 0.01
    assert np.dot(g, -eta * g) == pytest.approx(-eta * np.dot(g, g))


def test_conflict_probe_leaves_trainer_untouched(small_world):
    _, ds, bundle, s2 = small_world
    tr = ProjTrainer(bundle, ds, replace(s2, variant="proj"))
    tr.run(6)
    theta, target = tr.theta.copy(), tr.state.target.decoder.params.copy()
    measure_conflict(tr, seed=3)
    target_update_probe(tr, seed=3)
    np.testing.assert_array_equal(tr.theta, theta)
    np.testing.assert_array_equal(tr.state.target.decoder.params, target)


def test_guided_step_never_moves_the_target(small_world):
    _, ds, bundle, s2 = small_world
    tr = ProjTrainer(bundle, ds, replace(s2, variant="proj"))
    tr.run(6)
    target_change, online_change = target_update_probe(tr, seed=4)
    assert target_change == 0.0 and online_change > 0.0


def test_support_ratio_of_in_distribution_probes():
    # fresh draws from the data distribution; a literal dataset point would
    # count itself as its own nearest neighbor
    acts = make_rng(0).uniform(-1, 1, (2000, 3))
    r = support_distance_ratio(acts, make_rng(1).uniform(-1, 1, (500, 3)))
    assert 0.8 <= r.ratio_q95 <= 1.2


def test_support_ratio_of_displaced_probes():
    acts = make_rng(2).uniform(-1, 1, (2000, 2))
    base = support_distance_ratio(acts, acts).boundary
    noise = make_rng(3).uniform(-1, 1, acts.shape)
    noise *= 10 * base / np.linalg.norm(noise, axis=1, keepdims=True)
    assert support_distance_ratio(acts, acts + noise).ratio_q95 >= 5


@settings(max_examples=20, deadline=None)
@given(st.floats(0.01, 100.0), st.integers(0, 1000))
def test_support_ratio_is_scale_free(scale, seed):
    rng = make_rng(seed)
    acts = rng.normal(size=(300, 2))
    probes = rng.normal(size=(50, 2)) * 1.5
    a = support_distance_ratio(acts, probes).ratio_q95
    b = support_distance_ratio(acts * scale, probes * scale).ratio_q95
    assert a == pytest.approx(b, rel=1e-9)


def test_support_ratio_needs_enough_data():
    with pytest.raises(ValueError):
        support_distance_ratio(np.zeros((3, 2)), np.zeros((1, 2)))


def test_geometry_of_zero_residuals():
    env = make_env("unimodal-quad")
    ds = generate_dataset(env, "medium", 2000, 0)
    noise = make_rng(1).normal(scale=1e-4, size=ds.actions.shape)
    geo = residual_geometry_summary(ds, lambda s: ds.actions + noise)
    assert geo["mode_count_estimate"] == 1


@pytest.fixture(scope="module")
def bc_bases():
    out = {}
    for name, tier in (("bimodal-bandit", "mixture-expert"), ("unimodal-quad", "medium")):
        ds = generate_dataset(make_env(name), tier, 20_000, 0)
        b = train_stage1(ds, Stage1Config(steps=2000, hidden=(64, 64), n_critics=2,
                                          subset_size=1))
        out[name] = (ds, b.base_policy)
    return out


def test_bimodal_residuals_have_two_modes(bc_bases):
    ds, base = bc_bases["bimodal-bandit"]
    geo = residual_geometry_summary(ds, base)
    assert geo["mode_count_estimate"] >= 2
    assert sum(geo["cluster_fractions"][:2]) >= 0.8


def test_unimodal_residuals_have_one_mode(bc_bases):
    ds, base = bc_bases["unimodal-quad"]
    geo = residual_geometry_summary(ds, base)
    assert geo["mode_count_estimate"] >= 1
    assert geo["cluster_fractions"][0] >= 0.9
