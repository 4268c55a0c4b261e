import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hopqa import autodiff as ad
from hopqa.autodiff import ParamStore, Tensor
from hopqa.nn import multi_head_attention


def leaf(x, dtype=np.float64):
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=True)


def test_sigmoid_midpoint():
    assert ad.apply_primitive("sigmoid", Tensor(0.0)).item() == 0.5


def test_softmax_symmetric():
    out = ad.apply_primitive("softmax", Tensor([3.7, 3.7]))
    np.testing.assert_array_equal(out.data, [0.5, 0.5])


def test_matmul_against_loop_oracle():
    a = np.array([[1, 2, 3], [4, 5, 6]], dtype=np.float64)
    b = np.array([[7, 8], [9, 10], [11, 12]], dtype=np.float64)
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    got = ad.apply_primitive("matmul", Tensor(a), Tensor(b))
    np.testing.assert_array_equal(got.data, want)


def test_unknown_primitive():
    with pytest.raises(ValueError):
        ad.apply_primitive("conv9d", Tensor(1.0))


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as err:
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert "matmul" in str(err.value) and "(2, 3)" in str(err.value)


def test_product_rule():
    store = ParamStore()
    store["x"], store["y"] = leaf(3.0), leaf(5.0)
    grads = ad.backward(ad.multiply(store["x"], store["y"]), store)
    assert grads["x"] == 5.0 and grads["y"] == 3.0


def test_sigmoid_derivative_at_zero():
    x = leaf(0.0)
    ad.backward(ad.sigmoid(x))
    assert x.grad == 0.25


def test_reused_node_accumulates():
    x = leaf(3.0)
    ad.backward(ad.multiply(x, x))
    assert x.grad == 6.0


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        ad.backward(leaf([1.0, 2.0]))


def test_off_graph_parameter_gets_zeros():
    store = ParamStore()
    store["a"], store["b"] = leaf([1.0, 2.0]), leaf([4.0])
    grads = ad.backward(ad.sum_(store["a"]), store)
    np.testing.assert_array_equal(grads["b"], [0.0])


def test_finite_diff_quadratic():
    store = ParamStore()
    store["x"] = leaf(3.0)
    g = ad.finite_diff_grad(lambda: ad.multiply(store["x"], store["x"]), store, 1e-4)
    assert abs(g["x"] - 6.0) < 1e-6


def test_finite_diff_constant():
    store = ParamStore()
    store["x"] = leaf([1.0, -2.0])
    g = ad.finite_diff_grad(lambda: Tensor(7.0), store, 1e-4)
    np.testing.assert_array_equal(g["x"], [0.0, 0.0])


def test_finite_diff_rejects_nonfinite():
    store = ParamStore()
    store["x"] = leaf(0.0)
    with pytest.raises(FloatingPointError), np.errstate(divide="ignore"):
        ad.finite_diff_grad(lambda: ad.log(store["x"]), store, 1e-4)


def test_duplicate_parameter_name():
    store = ParamStore()
    store["w"] = leaf(1.0)
    with pytest.raises(KeyError):
        store["w"] = leaf(2.0)


def _composite(store):
    h = ad.tanh(ad.add(ad.matmul(store["x"], store["w1"]), store["b1"]))
    h = ad.gelu(ad.matmul(h, store["w2"]))
    h = ad.layer_norm(h, store["g"], store["b"])
    p = ad.log_softmax(ad.matmul(h, store["w3"]))
    return ad.neg(ad.mean(ad.add(p[:, 0], ad.log_sigmoid(ad.sum_(h, axis=1)))))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_composite_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    shapes = {"x": (3, 4), "w1": (4, 5), "b1": (5,), "w2": (5, 5), "g": (5,), "b": (5,), "w3": (5, 3)}
    for name, shape in shapes.items():
        store[name] = leaf(rng.normal(size=shape))
    with ad.precision(np.float64):
        analytic = ad.backward(_composite(store), store)
        numeric = ad.finite_diff_grad(lambda: _composite(store), store, 1e-5)
    for name in shapes:
        a, n = analytic[name], numeric[name]
        scale = np.maximum(np.abs(a), np.abs(n))
        rel = np.abs(a - n) / np.where(scale == 0, 1.0, scale)
        assert (rel[scale > 1e-8] < 1e-3).all(), name


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(xs):
    out = ad.softmax(Tensor(np.array(xs)[None, :]))
    assert abs(out.data.sum() - 1.0) <= 1e-6


def test_masked_softmax_gives_exact_zero():
    out = ad.softmax(Tensor([[1.0, 50.0, 2.0]]), mask=np.array([[True, False, True]]))
    assert out.data[0, 1] == 0.0


def test_fully_masked_row_raises():
    with pytest.raises(ad.AttentionError):
        ad.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]]))


def test_log_sigmoid_is_stable():
    x = leaf([-800.0, 800.0])
    y = ad.log_sigmoid(x)
    assert np.isfinite(y.data).all()
    assert y.data[0] == -800.0
    ad.backward(ad.sum_(y))
    assert np.isfinite(x.grad).all()


def test_precision_switch():
    with ad.precision(np.float64):
        assert Tensor(1.0).data.dtype == np.float64
    assert Tensor(1.0).data.dtype == np.float32


def test_no_grad_builds_no_graph():
    x = leaf(2.0)
    with ad.no_grad():
        y = ad.multiply(x, x)
    assert not y.requires_grad


# ---------------------------------------------------------------- attention


def test_single_key_gets_all_weight():
    q = Tensor(np.random.default_rng(0).normal(size=(3, 4)))
    k = Tensor(np.ones((1, 4)))
    _, _, w = multi_head_attention(q, k, k, None, 2)
    np.testing.assert_array_equal(w.data, np.ones((2, 3, 1)))


def test_masked_key_has_zero_weight():
    rng = np.random.default_rng(1)
    q, k = Tensor(rng.normal(size=(4, 4))), Tensor(rng.normal(size=(3, 4)))
    mask = np.array([True, False, True])[None, :].repeat(4, axis=0)
    _, _, w = multi_head_attention(q, k, k, mask, 2)
    assert (w.data[..., 1] == 0).all()


def test_attention_hand_oracle():
    # one head, two queries, two keys; dh = 2 so scores are scaled by 1/sqrt(2)
    q = np.array([[1.0, 0.0], [0.0, 1.0]])
    k = np.array([[1.0, 1.0], [2.0, 0.0]])
    v = np.array([[1.0, 2.0], [3.0, 4.0]])
    out, scores, w = multi_head_attention(Tensor(q), Tensor(k), Tensor(v), None, 1)
    s = np.array([[1.0, 2.0], [1.0, 0.0]]) / math.sqrt(2)
    e = np.exp(s)
    weights = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(scores.data[0], s, rtol=1e-6)
    np.testing.assert_allclose(w.data[0], weights, rtol=1e-6)
    np.testing.assert_allclose(out.data, weights @ v, rtol=1e-6)


def test_attention_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    store = ParamStore()
    store["q"], store["k"], store["v"] = (leaf(rng.normal(size=(3, 4))) for _ in range(3))
    mask = np.array([[True, True, False], [True, True, True], [False, True, True]])

    def loss():
        out, _, _ = multi_head_attention(store["q"], store["k"], store["v"], mask, 2)
        return ad.sum_(ad.multiply(out, out))

    with ad.precision(np.float64):
        analytic = ad.backward(loss(), store)
        numeric = ad.finite_diff_grad(loss, store, 1e-5)
    for name in store:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-4, atol=1e-7)


def _fd_check(loss, store):
    with ad.precision(np.float64):
        analytic = ad.backward(loss(), store)
        numeric = ad.finite_diff_grad(loss, store, 1e-6)
    for name in store:
        np.testing.assert_allclose(analytic[name], numeric[name], rtol=1e-5, atol=1e-8)


def test_affine_matches_matmul_plus_bias_and_finite_differences():
    rng = np.random.default_rng(5)
    store = ParamStore()
    store["x"], store["w"], store["b"] = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(4, 5))), leaf(rng.normal(size=5))
    fused = ad.affine(store["x"], store["w"], store["b"]).data
    np.testing.assert_array_equal(fused, ad.add(ad.matmul(store["x"], store["w"]), store["b"]).data)
    _fd_check(lambda: ad.sum_(ad.multiply(ad.affine(store["x"], store["w"], store["b"]), 0.5 * ad.affine(store["x"], store["w"], store["b"]))), store)


def test_affine_shape_errors():
    with pytest.raises(ad.ShapeError, match="affine"):
        ad.affine(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))
    with pytest.raises(ad.ShapeError, match="affine"):
        ad.affine(leaf(np.ones((2, 4))), leaf(np.ones((4, 5))), leaf(np.ones(4)))


def test_split_merge_heads_round_trip_and_gradients():
    rng = np.random.default_rng(6)
    store = ParamStore()
    store["x"] = leaf(rng.normal(size=(2, 3, 6)))
    s = ad.split_heads(store["x"], 3)
    assert s.shape == (2, 3, 3, 2)
    # head h holds columns [2h, 2h+2)
    np.testing.assert_array_equal(s.data[1, 2, :, :], store["x"].data[1, :, 4:6])
    np.testing.assert_array_equal(ad.merge_heads(s).data, store["x"].data)
    weights = rng.normal(size=(2, 3, 3, 2))
    _fd_check(lambda: ad.sum_(ad.multiply(ad.split_heads(store["x"], 3), weights)), store)
    with pytest.raises(ad.ShapeError):
        ad.split_heads(store["x"], 4)


def test_attention_scores_matches_scaled_product():
    rng = np.random.default_rng(7)
    store = ParamStore()
    store["q"], store["k"] = leaf(rng.normal(size=(2, 3, 4))), leaf(rng.normal(size=(2, 5, 4)))
    out = ad.attention_scores(store["q"], store["k"], 0.5).data
    np.testing.assert_allclose(out, 0.5 * np.einsum("hqd,hkd->hqk", store["q"].data, store["k"].data), rtol=1e-12)
    w = rng.normal(size=(2, 3, 5))
    _fd_check(lambda: ad.sum_(ad.multiply(ad.attention_scores(store["q"], store["k"], 0.5), w)), store)
