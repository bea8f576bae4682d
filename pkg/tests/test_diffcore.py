import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import erf as sp_erf

from sorl.diffcore import (
    GraphError,
    MlpSpec,
    NonFiniteError,
    ParamStore,
    Tensor,
    adam_step,
    backward,
    block_rel_error,
    clip_global_norm,
    concat,
    finite_difference,
    gelu,
    global_grad_norm,
    grad_check,
    init_mlp,
    layer_norm,
    linear,
    mlp_forward,
    slice_rows,
    square,
    stopgrad,
    take_rows,
)


def _store(spec, seed=0, jitter=0.0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    init_mlp(store, spec, rng)
    if jitter:
        for t in store.params.values():
            t.data = t.data + jitter * rng.standard_normal(t.data.shape)
    return store


def reference_forward(arrays, spec, x):
    """Plain numpy re-implementation used as an independent oracle."""
    h = np.array(x, dtype=np.float64)
    n_hidden = len(spec.hidden_dims)
    for i in range(n_hidden + 1):
        h = h.dot(arrays[f"l{i}.w"]) + arrays[f"l{i}.b"]
        if i == n_hidden:
            break
        if spec.use_layer_norm:
            mu = h.mean(axis=1, keepdims=True)
            var = ((h - mu) ** 2).mean(axis=1, keepdims=True)
            h = (h - mu) / np.sqrt(var + 1e-5) * arrays[f"l{i}.ln_g"] + arrays[f"l{i}.ln_b"]
        h = 0.5 * h * (1.0 + sp_erf(h / math.sqrt(2.0)))
    return h


# ---------------------------------------------------------------- forward


def test_zero_network_outputs_zero():
    spec = MlpSpec(5, 3, (8, 8))
    store = _store(spec)
    for t in store.params.values():
        t.data = np.zeros_like(t.data)
    out = mlp_forward(store, spec, np.random.default_rng(1).standard_normal((4, 5)))
    assert np.array_equal(out.data, np.zeros((4, 3)))


def test_identity_linear_layer_passes_input_through():
    spec = MlpSpec(3, 3, ())
    store = _store(spec)
    store["l0.w"].data = np.eye(3)
    store["l0.b"].data = np.zeros(3)
    v = np.array([[1.5, -2.0, 0.25]])
    assert np.array_equal(mlp_forward(store, spec, v).data, v)


@pytest.mark.parametrize("use_ln", [False, True])
def test_forward_matches_independent_reimplementation(use_ln):
    spec = MlpSpec(6, 4, (16, 16), use_ln)
    store = _store(spec, seed=3, jitter=0.2)
    x = np.random.default_rng(4).standard_normal((7, 6))
    out = mlp_forward(store, spec, x).data
    ref = reference_forward(store.arrays(), spec, x)
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_forward_rejects_shape_mismatch():
    spec = MlpSpec(3, 1, (4,))
    with pytest.raises(ValueError):
        mlp_forward(_store(spec), spec, np.zeros((2, 4)))


def test_forward_rejects_non_finite_output():
    spec = MlpSpec(2, 1, (4,))
    store = _store(spec)
    with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
        mlp_forward(store, spec, np.array([[np.inf, 0.0]]))


def test_frozen_forward_gives_no_param_grads_but_input_grads():
    spec = MlpSpec(3, 2, (8,))
    store = _store(spec, jitter=0.1)
    x = Tensor(np.random.default_rng(0).standard_normal((4, 3)), requires_grad=True)
    backward(mlp_forward(store, spec, x, frozen=True).sum())
    assert all(g is None for g in store.grads().values())
    assert x.grad is not None and np.abs(x.grad).sum() > 0


# ---------------------------------------------------------------- backward


def test_grad_of_sum_is_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(w.sum())
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_stopgrad_product_gives_value_of_w():
    vals = np.array([0.3, -1.2, 2.5])
    w = Tensor(vals.copy(), requires_grad=True)
    backward((stopgrad(w) * w).sum())
    assert np.array_equal(w.grad, vals)


def test_backward_requires_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        backward(w * 2.0)


def test_backward_twice_raises():
    w = Tensor(np.ones(3), requires_grad=True)
    loss = (w * w).sum()
    backward(loss)
    with pytest.raises(GraphError):
        backward(loss)


def test_random_two_layer_mlp_matches_finite_differences():
    spec = MlpSpec(5, 3, (16, 16))
    rep = grad_check(spec, seed=11, tolerance=1e-4)
    assert rep.max_rel_error < 1e-4


def test_elementary_ops_match_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3))
    w = rng.standard_normal((3, 5))
    b = rng.standard_normal(5)
    g = 1.0 + 0.1 * rng.standard_normal(5)
    beta = 0.1 * rng.standard_normal(5)
    leaves = [Tensor(a, requires_grad=True) for a in (x, w, b, g, beta)]
    idx = np.array([3, 0, 0, 2])

    def build():
        h = layer_norm(linear(leaves[0], leaves[1], leaves[2]), leaves[3], leaves[4])
        h = gelu(h)
        h = concat([slice_rows(h, 1, 3), take_rows(h, idx)], axis=0)
        return (square(h) / 3.0 - h * 0.5).mean()

    backward(build())
    analytic = [t.grad for t in leaves]
    numeric = finite_difference(lambda: build().item(), [t.data for t in leaves])
    for a, n in zip(analytic, numeric):
        assert block_rel_error(a, n) < 1e-6


def test_grad_check_linear_model():
    rep = grad_check(MlpSpec(4, 2, ()), seed=0, tolerance=1e-6)
    assert rep.max_rel_error < 1e-6


def test_grad_check_gelu_mlp_width16():
    rep = grad_check(MlpSpec(4, 2, (16, 16)), seed=1, tolerance=1e-4)
    assert rep.passed(1e-4)


def test_zero_parameter_spec_rejected():
    with pytest.raises(ValueError):
        grad_check(MlpSpec(0, 1, ()), seed=0, tolerance=1e-4)


def test_grad_check_rejects_non_positive_tolerance():
    with pytest.raises(ValueError):
        grad_check(MlpSpec(2, 1, (3,)), seed=0, tolerance=0.0)


# ---------------------------------------------------------------- adam


def _scalar_store(value):
    s = ParamStore()
    s.add("p", np.array([value]))
    return s


def test_adam_zero_grad_leaves_params_and_counts_step():
    s = _scalar_store(0.7)
    s["p"].grad = np.zeros(1)
    adam_step(s, 1e-3)
    assert s["p"].data[0] == 0.7
    assert s.step == 1
    assert s["p"].grad is None


def test_adam_without_gradients_raises():
    with pytest.raises(GraphError):
        adam_step(_scalar_store(0.0), 1e-3)


@pytest.mark.parametrize("g", [0.3, -2.0, 1e-3])
def test_adam_first_step_moves_by_lr(g):
    lr, eps = 1e-4, 1e-8
    s = _scalar_store(1.0)
    s["p"].grad = np.array([g])
    adam_step(s, lr)
    # first step: m_hat = g, v_hat = g^2
    expected = 1.0 - lr * g / (abs(g) + eps)
    assert s["p"].data[0] == pytest.approx(expected, rel=0, abs=1e-15)
    assert abs(s["p"].data[0] - 1.0) == pytest.approx(lr, rel=1e-4)
    assert np.sign(s["p"].data[0] - 1.0) == -np.sign(g)


def test_adam_two_steps_match_scalar_recurrence():
    lr, b1, b2, eps, g = 1e-2, 0.9, 0.999, 1e-8, 0.37
    s = _scalar_store(0.5)
    for _ in range(2):
        s["p"].grad = np.array([g])
        adam_step(s, lr, b1, b2, eps)
    p, m, v = 0.5, 0.0, 0.0
    for k in (1, 2):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p -= lr * (m / (1 - b1 ** k)) / (math.sqrt(v / (1 - b2 ** k)) + eps)
    assert s["p"].data[0] == pytest.approx(p, abs=1e-15)
    assert s.step == 2


# ---------------------------------------------------------------- clipping


def _grad_store(*grads):
    s = ParamStore()
    for i, g in enumerate(grads):
        s.add(f"g{i}", np.zeros(len(g)))
        s[f"g{i}"].grad = np.array(g, dtype=np.float64)
    return s


def test_clip_below_threshold_is_noop():
    s = _grad_store([0.3, 0.4])
    assert clip_global_norm(s, 1.0) == 1.0
    assert np.array_equal(s["g0"].grad, [0.3, 0.4])


def test_clip_single_vector():
    s = _grad_store([3.0, 4.0])
    f = clip_global_norm(s, 1.0)
    assert f == pytest.approx(0.2)
    np.testing.assert_allclose(s["g0"].grad, [0.6, 0.8])


def test_clip_two_tensors_global_norm():
    s = _grad_store([3.0, 0.0], [0.0, 4.0])
    assert clip_global_norm(s, 1.0) == pytest.approx(0.2)
    np.testing.assert_allclose(s["g0"].grad, [0.6, 0.0])
    np.testing.assert_allclose(s["g1"].grad, [0.0, 0.8])


def test_clip_rejects_non_positive_norm():
    with pytest.raises(ValueError):
        clip_global_norm(_grad_store([1.0]), 0.0)


# ---------------------------------------------------------------- properties


small_specs = st.builds(
    MlpSpec,
    st.integers(1, 5),
    st.integers(1, 3),
    st.lists(st.integers(1, 12), min_size=1, max_size=2).map(tuple),
    st.booleans(),
)


@settings(max_examples=25, deadline=None)
@given(spec=small_specs, seed=st.integers(0, 2 ** 16))
def test_property_gradients_match_finite_differences(spec, seed):
    assert grad_check(spec, seed, tolerance=1e-4).max_rel_error < 1e-4


@settings(max_examples=25, deadline=None)
@given(spec=small_specs, seed=st.integers(0, 2 ** 16))
def test_property_forward_and_backward_are_deterministic(spec, seed):
    x = np.random.default_rng(seed).standard_normal((3, spec.input_dim))
    runs = []
    for _ in range(2):
        store = _store(spec, seed, jitter=0.1)
        out = mlp_forward(store, spec, x)
        backward(square(out).sum())
        runs.append((out.data.copy(), {k: g.copy() for k, g in store.grads().items()}))
    assert np.array_equal(runs[0][0], runs[1][0])
    for k in runs[0][1]:
        assert np.array_equal(runs[0][1][k], runs[1][1][k])


@settings(max_examples=25, deadline=None)
@given(spec=small_specs, seed=st.integers(0, 2 ** 16))
def test_property_stopgrad_blocks_parameter_gradients(spec, seed):
    store = _store(spec, seed)
    x = np.random.default_rng(seed).standard_normal((3, spec.input_dim))
    out = mlp_forward(store, spec, x)
    backward((stopgrad(out) * 3.0).sum() + Tensor(np.ones(1), requires_grad=True).sum())
    assert all(g is None or not np.any(g) for g in store.grads().values())


@settings(max_examples=50, deadline=None)
@given(
    grads=st.lists(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=4), min_size=1, max_size=3),
    max_norm=st.floats(1e-3, 1e3),
)
def test_property_clip_is_idempotent(grads, max_norm):
    once = _grad_store(*grads)
    clip_global_norm(once, max_norm)
    twice = _grad_store(*grads)
    clip_global_norm(twice, max_norm)
    clip_global_norm(twice, max_norm)
    for k in once.params:
        np.testing.assert_allclose(once[k].grad, twice[k].grad, rtol=1e-12, atol=0)
    assert global_grad_norm(once) <= max_norm * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(spec=small_specs, seed=st.integers(0, 2 ** 16))
def test_property_moments_shape_match_and_step_counts(spec, seed):
    store = _store(spec, seed)
    x = np.random.default_rng(seed).standard_normal((2, spec.input_dim))
    for k in range(1, 3):
        backward(square(mlp_forward(store, spec, x)).mean())
        adam_step(store, 1e-3)
        assert store.step == k
    for name, t in store.params.items():
        assert store.m[name].shape == t.data.shape == store.v[name].shape
