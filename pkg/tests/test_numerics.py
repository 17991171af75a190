import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streamvoice.errors import DimensionError, NumericError
from streamvoice.numerics import _kernels as K
from streamvoice.numerics import (
    Parameter,
    ParamStore,
    causal_attention,
    causal_attention_backward,
    cross_entropy,
    cross_entropy_backward,
    linear,
    linear_backward,
    mse_sum_mean,
    mse_sum_mean_backward,
    numeric_grad_array,
    rel_error,
    rmsnorm,
    rmsnorm_backward,
    rope,
    rope_backward,
    swiglu,
    swiglu_backward,
)


def P(v, name="p"):
    return Parameter(name, np.asarray(v, dtype=np.float64))


def max_rel(a, n):
    """Relative error of a whole gradient tensor (norm of the difference)."""
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


# -- linear -------------------------------------------------------------------


def test_linear_identity():
    y, _ = linear(np.array([1.0, 2.0]), P(np.eye(2)), P(np.zeros(2)))
    np.testing.assert_array_equal(y, [1.0, 2.0])


def test_linear_hand_example():
    y, _ = linear(np.array([1.0, 0.0]), P([[2.0, 3.0], [5.0, 7.0]]), P([1.0, 1.0]))
    np.testing.assert_array_equal(y, [3.0, 4.0])


def test_linear_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(3,\).*\(2, 2\)"):
        linear(np.ones(3), P(np.eye(2)))


def test_linear_weight_gradient_fd():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    w, b = P(rng.standard_normal((4, 5)), "w"), P(rng.standard_normal(5), "b")

    def f():
        return linear(x, w, b)[0].sum()

    y, cache = linear(x, w, b)
    dx = linear_backward(np.ones_like(y), cache)
    assert max_rel(w.grad, numeric_grad_array(f, w.value)) < 1e-6
    assert max_rel(b.grad, numeric_grad_array(f, b.value)) < 1e-6
    assert max_rel(dx, numeric_grad_array(f, x)) < 1e-6


# -- attention ----------------------------------------------------------------


def test_attention_single_position_returns_v():
    rng = np.random.default_rng(1)
    q, k, v = (rng.standard_normal((1, 4)) for _ in range(3))
    out, _ = causal_attention(q, k, v)
    np.testing.assert_allclose(out, v)


def test_attention_identical_keys_average():
    rng = np.random.default_rng(2)
    q = rng.standard_normal((2, 4))
    k = np.tile(rng.standard_normal(4), (2, 1))
    v = rng.standard_normal((2, 4))
    out, _ = causal_attention(q, k, v)
    np.testing.assert_allclose(out[1], v.mean(axis=0), atol=1e-15)


def test_attention_future_weights_exactly_zero():
    rng = np.random.default_rng(3)
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    _, (_, _, _, probs, _) = causal_attention(q, k, v)
    assert np.all(probs[..., np.triu_indices(5, 1)[0], np.triu_indices(5, 1)[1]] == 0.0)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)
    assert np.all(probs >= 0)


def test_attention_start_pos_matches_full():
    rng = np.random.default_rng(4)
    q, k, v = (rng.standard_normal((6, 4)) for _ in range(3))
    full, _ = causal_attention(q, k, v)
    tail, _ = causal_attention(q[4:], k, v, start_pos=4)
    np.testing.assert_allclose(tail, full[4:], atol=1e-14)


def test_attention_nonfinite_scores():
    q = np.full((2, 4), np.inf)
    with pytest.raises(NumericError):
        causal_attention(q, np.ones((2, 4)), np.ones((2, 4)))


def test_attention_dimension_errors():
    with pytest.raises(DimensionError):
        causal_attention(np.ones((2, 4)), np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        causal_attention(np.ones((3, 4)), np.ones((2, 4)), np.ones((2, 4)), start_pos=0)


def test_attention_gradient_fd():
    rng = np.random.default_rng(5)
    q, k, v = (rng.standard_normal((2, 5, 4)) for _ in range(3))
    g = rng.standard_normal((2, 5, 4))

    def f():
        return float((causal_attention(q, k, v)[0] * g).sum())

    out, cache = causal_attention(q, k, v)
    dq, dk, dv = causal_attention_backward(g, cache)
    for analytic, arr in ((dq, q), (dk, k), (dv, v)):
        assert max_rel(analytic, numeric_grad_array(f, arr)) < 1e-6


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 7), dh=st.integers(1, 6), seed=st.integers(0, 10_000))
def test_attention_rows_are_distributions(n, dh, seed):
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((n, dh)) for _ in range(3))
    _, (_, _, _, probs, _) = causal_attention(q, k, v)
    assert np.all(probs >= 0)
    np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-9)
    assert np.all(np.triu(probs, 1) == 0.0)


# -- rmsnorm / swiglu / rope --------------------------------------------------


@pytest.mark.parametrize("c", [3.0, -0.5, 1e3])
def test_rmsnorm_constant_vector(c):
    y, _ = rmsnorm(np.full(8, c), P(np.ones(8)))
    # exact up to the epsilon guard: c / sqrt(c^2 + eps)
    np.testing.assert_allclose(y, np.sign(c) * np.ones(8), rtol=1e-4)


def test_rmsnorm_zero_vector_guarded():
    y, _ = rmsnorm(np.zeros(4), P(np.ones(4)))
    assert np.all(np.isfinite(y)) and np.all(y == 0)


def test_rmsnorm_unit_rms():
    x = np.random.default_rng(6).standard_normal((3, 16)) * 5
    y, _ = rmsnorm(x, P(np.ones(16)))
    np.testing.assert_allclose(np.sqrt((y**2).mean(-1)), 1.0, rtol=1e-5)


def test_rmsnorm_gradient_fd():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 6))
    gain = P(rng.standard_normal(6))
    g = rng.standard_normal((3, 6))

    def f():
        return float((rmsnorm(x, gain)[0] * g).sum())

    y, cache = rmsnorm(x, gain)
    dx = rmsnorm_backward(g, cache)
    assert max_rel(dx, numeric_grad_array(f, x)) < 1e-6
    assert max_rel(gain.grad, numeric_grad_array(f, gain.value)) < 1e-6


def test_swiglu_gradient_fd():
    rng = np.random.default_rng(8)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((4, 5))
    g = rng.standard_normal((4, 5))

    def f():
        return float((swiglu(a, b)[0] * g).sum())

    _, cache = swiglu(a, b)
    da, db = swiglu_backward(g, cache)
    assert max_rel(da, numeric_grad_array(f, a)) < 1e-6
    assert max_rel(db, numeric_grad_array(f, b)) < 1e-6


def test_swiglu_value():
    a, b = np.array([0.0, 1.0, -2.0]), np.array([5.0, 2.0, 1.0])
    y, _ = swiglu(a, b)
    np.testing.assert_allclose(y, a / (1 + np.exp(-a)) * b)


def test_rope_position_zero_identity():
    x = np.random.default_rng(9).standard_normal((1, 8))
    y, _ = rope(x, np.array([0]))
    np.testing.assert_array_equal(y, x)


def test_rope_odd_dim_rejected():
    with pytest.raises(DimensionError):
        rope(np.ones((1, 3)), np.array([1]))


def test_rope_preserves_norm_and_relative_scores():
    rng = np.random.default_rng(10)
    q, k = rng.standard_normal(8), rng.standard_normal(8)
    rq, _ = rope(q[None], np.array([7]))
    rk, _ = rope(k[None], np.array([3]))
    rq2, _ = rope(q[None], np.array([14]))
    rk2, _ = rope(k[None], np.array([10]))
    np.testing.assert_allclose(np.linalg.norm(rq), np.linalg.norm(q))
    np.testing.assert_allclose(rq @ rk.T, rq2 @ rk2.T)


def test_rope_gradient_fd():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 6))
    g = rng.standard_normal((2, 4, 6))
    pos = np.arange(3, 7)

    def f():
        return float((rope(x, pos)[0] * g).sum())

    _, cache = rope(x, pos)
    assert max_rel(rope_backward(g, cache), numeric_grad_array(f, x)) < 1e-6


# -- losses -------------------------------------------------------------------


def test_cross_entropy_uniform():
    nll, _ = cross_entropy(np.zeros(2), 1)
    assert abs(float(nll) - math.log(2)) < 1e-12


def test_cross_entropy_peaked():
    nll, _ = cross_entropy(np.array([10.0, -10.0]), 0)
    expected = math.log1p(math.exp(-20.0))
    assert abs(float(nll) - expected) / expected < 1e-6
    assert abs(float(nll) - 2.06e-9) < 1e-11


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-1e3, 1e3), seed=st.integers(0, 10_000))
def test_cross_entropy_shift_invariant(c, seed):
    z = np.random.default_rng(seed).standard_normal(6)
    a, _ = cross_entropy(z, 2)
    b, _ = cross_entropy(z + c, 2)
    assert abs(float(a) - float(b)) < 1e-12 * max(1.0, abs(c))


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.zeros(4), 4)
    with pytest.raises(IndexError):
        cross_entropy(np.zeros(4), -1)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(12)
    z = rng.standard_normal((3, 5))
    t = np.array([0, 4, 2])

    def f():
        return float(cross_entropy(z, t)[0].sum())

    nll, cache = cross_entropy(z, t)
    g = cross_entropy_backward(np.ones(3), cache)
    assert max_rel(g, numeric_grad_array(f, z)) < 1e-6


def test_mse_reduction_and_gradient():
    val, _ = mse_sum_mean(np.full((1, 4), 0.5), np.zeros((1, 4)))
    assert val == 1.0
    rng = np.random.default_rng(13)
    p, t = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    _, cache = mse_sum_mean(p, t)
    g = mse_sum_mean_backward(1.0, cache)
    assert max_rel(g, numeric_grad_array(lambda: mse_sum_mean(p, t)[0], p)) < 1e-6


# -- plumbing ----------------------------------------------------------------


def test_rel_error_floor():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, 1.0 + 1e-7) < 1e-6


def test_paramstore_roundtrip_and_strict_load():
    s = ParamStore(np.float64)
    s.add("a", np.ones((2, 3)))
    s.add("b", np.zeros(3), trainable=False)
    assert s.n_values() == 6 and s.n_values(trainable_only=False) == 9
    state = s.state_dict()
    state["a"][0, 0] = 5.0
    s.load_state_dict(state)
    assert s["a"].value[0, 0] == 5.0
    with pytest.raises(KeyError):
        s.load_state_dict({"a": state["a"]})
    with pytest.raises(ValueError):
        s.load_state_dict({"a": np.ones((3, 2)), "b": state["b"]})
    with pytest.raises(KeyError):
        s.add("a", np.ones(1))


def test_parameter_grad_shape_and_zero():
    p = P(np.ones((2, 2)))
    assert p.grad.shape == p.value.shape
    p.grad += 3
    p.zero_grad()
    assert not p.grad.any()


def test_forward_determinism():
    rng = np.random.default_rng(14)
    q, k, v = (rng.standard_normal((2, 6, 4)) for _ in range(3))
    a, _ = causal_attention(q, k, v)
    b, _ = causal_attention(q.copy(), k.copy(), v.copy())
    assert np.array_equal(a, b)


# -- numba vs numpy kernel agreement -------------------------------------------


@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba not installed")
@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_kernel_paths_agree(dtype, tol):
    rng = np.random.default_rng(15)
    scores = rng.standard_normal((3, 5, 7)).astype(dtype)
    np.testing.assert_allclose(K.nb_causal_softmax(scores, 2), K.np_causal_softmax(scores, 2), atol=tol)
    probs = K.np_causal_softmax(scores, 2)
    d = rng.standard_normal(probs.shape).astype(dtype)
    np.testing.assert_allclose(K.nb_softmax_backward(probs, d), K.np_softmax_backward(probs, d), atol=tol)
    x = rng.standard_normal((4, 6)).astype(dtype)
    y = rng.standard_normal((4, 6)).astype(dtype)
    for a, b in zip(K.nb_rmsnorm_fwd(x, 1e-5), K.np_rmsnorm_fwd(x, 1e-5)):
        np.testing.assert_allclose(a, b, atol=tol, rtol=tol)
    inv = K.np_rmsnorm_fwd(x, 1e-5)[1]
    np.testing.assert_allclose(K.nb_rmsnorm_bwd(y, x, inv), K.np_rmsnorm_bwd(y, x, inv), atol=tol)
    np.testing.assert_allclose(K.nb_silu_mul_fwd(x, y), K.np_silu_mul_fwd(x, y), atol=tol)
    for a, b in zip(K.nb_silu_mul_bwd(y, x, y), K.np_silu_mul_bwd(y, x, y)):
        np.testing.assert_allclose(a, b, atol=tol)
    r = rng.standard_normal((2, 5, 6)).astype(dtype)
    cos, sin = (t.astype(dtype) for t in (np.cos(np.arange(15).reshape(5, 3)), np.sin(np.arange(15).reshape(5, 3))))
    for sign in (1, -1):
        np.testing.assert_allclose(K.nb_rope(r, cos, sin, sign), K.np_rope(r, cos, sin, sign), atol=tol)
