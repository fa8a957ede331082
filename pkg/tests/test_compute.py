import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tinymm import compute as C


def leaf(x):
    return C.Parameter(np.asarray(x, dtype=np.float64))


def test_matmul_known_values():
    out = C.matmul(C.tensor([[1.0, 2.0], [3.0, 4.0]]), C.tensor([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(C.ShapeError):
        C.matmul(C.tensor(np.ones((2, 3))), C.tensor(np.ones((2, 3))))
    with pytest.raises(C.ShapeError):
        C.matmul(C.tensor(np.ones(3)), C.tensor(np.ones((3, 1))))


def test_gelu_reference_values():
    out = C.gelu(C.tensor([0.0, 1.0, -1.0]))
    np.testing.assert_allclose(out.data, [0.0, 0.841345, -0.158655], atol=1e-6)


def test_layer_norm_two_values():
    out = C.layer_norm(C.tensor([[1.0, 3.0]]), C.tensor([1.0, 1.0]), C.tensor([0.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0, 1.0]], atol=1e-12)


def test_cross_entropy_reference():
    out = C.softmax_cross_entropy(C.tensor([1.0, 0.0]), 0)
    assert out.item() == pytest.approx(0.313262, abs=1e-6)
    with pytest.raises(IndexError):
        C.softmax_cross_entropy(C.tensor([1.0, 0.0]), 2)


def test_embed_gradient_accumulates_repeated_ids():
    table = leaf(np.arange(8.0).reshape(4, 2))
    out = C.embed(table, [1, 1, 3])
    C.sum(out).backward()
    np.testing.assert_array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_embed_empty_and_out_of_range():
    table = leaf(np.ones((4, 2)))
    assert C.embed(table, []).shape == (0, 2)
    with pytest.raises(IndexError):
        C.embed(table, [4])


def test_masked_softmax_zeroes_masked_entries():
    p = C.softmax(C.tensor([[1.0, 2.0, 3.0]]), np.array([[True, False, True]]))
    assert p.data[0, 1] == 0.0
    assert p.data.sum() == pytest.approx(1.0)


def test_attention_matches_composed_ops():
    rng = np.random.default_rng(0)
    q, k, v = (leaf(rng.standard_normal((2, 3, 5, 4))) for _ in range(3))
    mask = np.tril(np.ones((5, 5), dtype=bool))
    scores = C.scale(C.matmul(q, C.transpose(k, (0, 1, 3, 2))), 0.5)
    ref = C.matmul(C.softmax(scores, mask), v)
    out = C.attention(q, k, v, mask)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)
    grads = []
    for y in (ref, out):
        for t in (q, k, v):
            t.grad = None
        C.sum(C.mul(y, y)).backward()
        grads.append([t.grad.copy() for t in (q, k, v)])
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-10)


def test_masked_token_nll_ignores_masked_rows_exactly():
    logits = leaf(np.random.default_rng(0).normal(size=(1, 3, 4)))
    mask = np.array([[True, False, True]])
    a = C.masked_token_nll(logits, np.array([[1, 2, 3]]), mask)
    b = C.masked_token_nll(logits, np.array([[1, -100, 3]]), mask)
    assert a.data.tobytes() == b.data.tobytes()
    C.sum(a).backward()
    assert np.all(logits.grad[0, 1] == 0.0)


def test_masked_token_nll_requires_supervision():
    with pytest.raises(ValueError):
        C.masked_token_nll(leaf(np.zeros((1, 2, 3))), np.zeros((1, 2), int), np.zeros((1, 2), bool))


def test_backward_needs_scalar():
    x = leaf([1.0, 2.0])
    with pytest.raises(ValueError):
        (x * x).backward()


def test_frozen_parameter_gets_no_grad():
    w = C.Parameter(np.ones((2, 2)), trainable=False)
    x = leaf(np.ones((1, 2)))
    C.sum(C.matmul(x, w)).backward()
    assert w.grad is None
    np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with C.no_grad():
        y = x * x
    assert not y.requires_grad


def test_take_rows_gradient_and_bounds():
    src = leaf(np.arange(6.0).reshape(3, 2))
    out = C.take_rows(src, np.array([[0, 2], [2, 2]]))
    assert out.shape == (2, 2, 2)
    C.sum(out).backward()
    np.testing.assert_array_equal(src.grad, [[1, 1], [0, 0], [3, 3]])
    with pytest.raises(IndexError):
        C.take_rows(src, np.array([3]))


def test_numeric_grad_of_square():
    a = np.array([1.0, -2.0])
    g = C.numeric_grad(lambda: float(np.sum(a ** 2)), a)
    np.testing.assert_allclose(g, [2.0, -4.0], atol=1e-8)


def test_relative_error_floor():
    assert C.relative_error(np.array([0.0]), np.array([1e-9])) < 1e-3
    assert C.relative_error(np.array([1.0]), np.array([2.0])) == pytest.approx(0.5)


finite = st.floats(-5, 5, allow_nan=False)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_softmax_rows_sum_to_one(x):
    p = C.softmax(C.tensor(x)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    assert np.all(p >= 0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_layer_norm_output_is_standardized(x):
    x = x + np.linspace(0, 1, 5)  # avoid constant rows
    out = C.layer_norm(C.tensor(x), C.tensor(np.ones(5)), C.tensor(np.zeros(5))).data
    np.testing.assert_allclose(out.mean(axis=-1), 0.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3, 2), elements=finite))
def test_matmul_gradient_matches_finite_differences(a, b):
    pa, pb = leaf(a.copy()), leaf(b.copy())
    C.sum(C.matmul(pa, pb)).backward()
    num = C.numeric_grad(lambda: float(np.sum(pa.data @ pb.data)), pa.data)
    # near-zero entries only carry roundoff of |f| / h, hence the absolute floor
    np.testing.assert_allclose(pa.grad, num, rtol=1e-6, atol=1e-7)


def test_dtype_is_preserved_in_float32():
    x = C.Parameter(np.ones((2, 3), dtype=np.float32))
    y = C.gelu(C.layer_norm(x, C.tensor(np.ones(3, np.float32), np.float32),
                            C.tensor(np.zeros(3, np.float32), np.float32)))
    assert y.dtype == np.float32
