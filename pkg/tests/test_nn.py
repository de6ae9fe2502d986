import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import directional_check
from spar.nn import (AdamState, GraphEnsemble, ParamGraph, TrainingDivergence,
                     adam_step, clip_by_global_norm, count_params, make_rng, mlp_spec,
                     polyak_update)


def test_identity_graph_passes_input_through():
    g = ParamGraph([2, 2], ["identity"], np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    np.testing.assert_array_equal(g.forward(np.array([0.3, -0.7])), [0.3, -0.7])


def test_zero_params_give_zero_output():
    sizes, acts = mlp_spec(3, (5, 4), 2, activation="tanh")
    g = ParamGraph(sizes, acts)
    x = make_rng(0).normal(size=(7, 3))
    np.testing.assert_array_equal(g.forward(x), np.zeros((7, 2)))


def test_relu_graph_matches_hand_rolled_matmul():
    g = ParamGraph.init([2, 4, 1], ["relu", "identity"], make_rng(1))
    p = g.params
    W1, b1 = p[:8].reshape(2, 4), p[8:12]
    W2, b2 = p[12:16].reshape(4, 1), p[16:17]
    x = np.array([1.0, 1.0])
    h = [max(0.0, sum(x[i] * W1[i, j] for i in range(2)) + b1[j]) for j in range(4)]
    y = sum(h[j] * W2[j, 0] for j in range(4)) + b2[0]
    assert g.forward(x)[0] == pytest.approx(y, abs=1e-15)


def test_init_bounds_follow_fan_in():
    g = ParamGraph.init([9, 16, 4], ["relu", "identity"], make_rng(2))
    for W, b in g.layers():
        bound = np.sqrt(1.0 / W.shape[0])
        assert np.all(np.abs(W) <= bound) and np.all(np.abs(b) <= bound)


def test_param_count():
    assert count_params([3, 8, 2]) == 3 * 8 + 8 + 8 * 2 + 2
    with pytest.raises(ValueError):
        ParamGraph([3, 2], ["relu"], np.zeros(5))
    with pytest.raises(ValueError):
        ParamGraph([3, 2], ["softplus"])


def test_zero_upstream_gives_zero_gradients():
    g = ParamGraph.init(*mlp_spec(3, (8,), 2), make_rng(3))
    gp, gx = g.backward(np.ones((4, 3)), np.zeros((4, 2)))
    assert not gp.any() and not gx.any()


def test_linear_gradient_is_analytic():
    g = ParamGraph([1, 1], ["identity"], np.array([0.7, -0.2]))
    gp, gx = g.backward(np.array([2.0]), np.array([1.0]))
    np.testing.assert_array_equal(gp, [2.0, 1.0])
    assert gx[0] == pytest.approx(0.7)


def test_tanh_graph_matches_central_differences():
    g = ParamGraph.init([3, 8, 2], ["tanh", "identity"], make_rng(4))
    x = make_rng(5).normal(size=(6, 3))
    up = make_rng(6).normal(size=(6, 2))
    gp, _ = g.backward(x, up)
    f = lambda p: np.sum(up * ParamGraph(g.layer_sizes, g.activations, p).forward(x))
    err, _, _, _ = directional_check(f, g.params, gp)
    assert err <= 1e-4


def test_ensemble_member_matches_single_graph():
    sizes, acts = mlp_spec(4, (8, 8), 1)
    ens = GraphEnsemble.init(3, sizes, acts, make_rng(7))
    x = make_rng(8).normal(size=(5, 4))
    y = ens.forward(x)
    for i in range(3):
        np.testing.assert_allclose(y[i], ens.member(i).forward(x), rtol=0, atol=1e-14)
    # per-member batches
    xs = make_rng(9).normal(size=(3, 5, 4))
    y2 = ens.forward(xs)
    for i in range(3):
        np.testing.assert_allclose(y2[i], ens.member(i).forward(xs[i]), atol=1e-14)


def test_adam_zero_gradient_keeps_params():
    st_ = AdamState(param_count=3)
    p = np.array([1.0, -2.0, 0.5])
    new, st2 = adam_step(st_, p, np.zeros(3))
    np.testing.assert_array_equal(new, p)
    assert st2.step == 1 and st_.step == 0


def test_adam_first_step_moves_by_learning_rate():
    st_ = AdamState(param_count=1, learning_rate=0.1)
    new, _ = adam_step(st_, np.array([0.0]), np.array([1.0]))
    # bias-corrected first step: m_hat = v_hat = 1, so the move is lr / (1 + eps)
    assert new[0] == pytest.approx(-0.1 / (1.0 + 1e-8), rel=1e-12)


def test_clip_scales_large_gradients():
    g = np.array([6.0, 8.0])  # norm 10
    np.testing.assert_allclose(clip_by_global_norm(g, 1.0), g * 0.1)
    np.testing.assert_array_equal(clip_by_global_norm(np.array([0.3, 0.4]), 1.0), [0.3, 0.4])
    # one clip per ensemble row
    rows = np.array([[6.0, 8.0], [0.3, 0.4]])
    np.testing.assert_allclose(clip_by_global_norm(rows, 1.0), [[0.6, 0.8], [0.3, 0.4]])


def test_adam_rejects_non_finite_gradients():
    with pytest.raises(TrainingDivergence):
        adam_step(AdamState(param_count=2), np.zeros(2), np.array([np.nan, 0.0]))


def test_polyak_edges():
    t, o = np.array([1.0, 2.0]), np.array([3.0, -1.0])
    np.testing.assert_array_equal(polyak_update(t, o, 1.0), o)
    # fixed point up to one rounding of (1 - tau) v + tau v
    np.testing.assert_allclose(polyak_update(o, o, 0.3), o, rtol=1e-15, atol=0)
    with pytest.raises(ValueError):
        polyak_update(t, o, 0.0)


def test_rng_is_reproducible():
    assert np.array_equal(make_rng(5).normal(size=4), make_rng(5).normal(size=4))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.001, 1.0), st.integers(0, 10_000))
def test_polyak_is_convex_combination(tau, seed):
    rng = make_rng(seed)
    t, o = rng.normal(size=5), rng.normal(size=5)
    out = polyak_update(t, o, tau)
    lo, hi = np.minimum(t, o), np.maximum(t, o)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 5.0))
def test_clipped_norm_never_exceeds_limit(seed, limit):
    g = make_rng(seed).normal(scale=10.0, size=20)
    assert np.linalg.norm(clip_by_global_norm(g, limit)) <= limit * (1 + 1e-12)
