import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy.stats import norm

from maeforge import tensor as T
from maeforge.tensor import Tensor

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)


# matmul


def test_matmul_identity():
    a = np.array([[1.5, -2.0], [0.25, 4.0]])
    assert np.array_equal(T.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_matmul_hand_example_against_triple_loop():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    loop = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(2):
                loop[i, j] += a[i, k] * b[k, j]
    out = T.matmul(Tensor(a), Tensor(b)).data
    assert np.array_equal(loop, [[19, 22], [43, 50]])
    assert np.array_equal(out, loop)


def test_matmul_zero():
    out = T.matmul(Tensor(np.zeros((3, 4))), Tensor(np.random.default_rng(0).random((4, 2))))
    assert np.array_equal(out.data, np.zeros((3, 2)))


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="matmul dimension mismatch"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_batched_linear_fast_path_matches_einsum(rng):
    a, b = rng.standard_normal((2, 5, 3)), rng.standard_normal((3, 4))
    out = T.matmul(Tensor(a), Tensor(b))
    assert out.shape == (2, 5, 4)
    assert np.allclose(out.data, np.einsum("btk,kn->btn", a, b), atol=1e-14)


# softmax


def test_softmax_uniform_row():
    assert np.array_equal(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])


def test_softmax_no_overflow():
    out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)


def test_softmax_log_weights():
    out = T.softmax_rows(Tensor([[math.log(1), math.log(2), math.log(3)]])).data
    assert np.allclose(out, [[1 / 6, 2 / 6, 3 / 6]], rtol=0, atol=1e-15)


def test_softmax_rows_needs_matrix():
    with pytest.raises(ValueError):
        T.softmax_rows(Tensor(np.zeros(3)))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=8), elements=finite))
def test_softmax_rows_are_distributions(x):
    out = T.softmax_rows(Tensor(x)).data
    assert np.all((out >= 0) & (out <= 1))
    assert np.all(np.abs(out.sum(axis=1) - 1.0) <= 1e-12)


# layer norm


def test_layer_norm_constant_vector_is_zero():
    out = T.layer_norm(Tensor(np.full((1, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    assert np.array_equal(out.data, np.zeros((1, 5)))


def test_layer_norm_two_values():
    out = T.layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
    assert np.array_equal(out.data, [[-1.0, 1.0]])


def test_layer_norm_affine_collapse(rng):
    out = T.layer_norm(Tensor(rng.standard_normal((3, 4))), Tensor(np.zeros(4)), Tensor(np.full(4, 5.0)))
    assert np.array_equal(out.data, np.full((3, 4), 5.0))


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 16)), elements=finite))
def test_layer_norm_standardises(x):
    spread = x.max(axis=1) - x.min(axis=1)
    x = x[spread > 1e-3]
    if x.size == 0:
        return
    d = x.shape[1]
    out = T.layer_norm(Tensor(x), Tensor(np.ones(d)), Tensor(np.zeros(d)), eps=0.0).data
    assert np.all(np.abs(out.mean(axis=1)) <= 1e-10)
    assert np.all(np.abs(out.var(axis=1) - 1.0) <= 1e-8)


# gelu


def test_gelu_values():
    out = T.gelu(Tensor([0.0, 10.0, 1.0])).data
    assert out[0] == 0.0
    assert out[1] == pytest.approx(10.0, rel=1e-12)
    assert out[2] == pytest.approx(norm.cdf(1.0), rel=1e-14)


# backward


def test_backward_sum():
    x = leaf([1.0, -2.0, 0.5])
    T.backward(T.sum(x))
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_square_sum():
    x = leaf([2.0, -3.0])
    T.backward(T.sum(x * x) / 1)
    assert np.array_equal(x.grad, [4.0, -6.0])


def test_backward_skips_detached():
    x = leaf([1.0, 2.0])
    c = Tensor([3.0, 4.0])
    T.backward(T.sum(x * c))
    assert c.grad is None
    assert np.array_equal(x.grad, [3.0, 4.0])


def test_backward_needs_scalar():
    with pytest.raises(ValueError):
        T.backward(leaf([1.0, 2.0]) * 2.0)


def test_backward_needs_grad_path():
    with pytest.raises(ValueError):
        T.backward(T.sum(Tensor([1.0])))


def test_tape_is_single_use():
    x = leaf([1.0, 2.0])
    loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(RuntimeError, match="tape already consumed"):
        T.backward(loss)


def test_gradients_accumulate_across_backward_calls():
    x = leaf([1.0])
    T.backward(T.sum(x * 2.0))
    T.backward(T.sum(x * 3.0))
    assert np.array_equal(x.grad, [5.0])


def test_shared_subexpression_gradients_add():
    x = leaf([1.5])
    y = x * x
    T.backward(T.sum(y + y))
    assert np.array_equal(x.grad, [6.0])


def test_broadcast_gradient_reduces_to_shape(rng):
    a, b = leaf(rng.standard_normal((2, 3))), leaf(rng.standard_normal(3))
    T.backward(T.sum(a + b))
    assert b.grad.shape == (3,) and np.array_equal(b.grad, [2.0, 2.0, 2.0])


def test_ndarray_on_left_defers_to_tensor():
    out = np.ones(2) + leaf([1.0, 2.0])
    assert isinstance(out, Tensor)


def test_take_gradient_scatters_duplicates():
    x = leaf(np.arange(6.0).reshape(1, 3, 2))
    T.backward(T.sum(T.take(x, np.array([[0, 0, 2]]))))
    assert np.array_equal(x.grad, [[[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]])


def test_cross_entropy_value():
    logits = np.array([[2.0, 0.5, -1.0], [0.0, 0.0, 0.0]])
    labels = np.array([0, 2])
    want = np.mean([-math.log(math.exp(2) / (math.exp(2) + math.exp(0.5) + math.exp(-1))), math.log(3)])
    assert T.cross_entropy(Tensor(logits), labels).item() == pytest.approx(want, rel=1e-14)


# finite differences


def test_finite_diff_of_sum(rng):
    x = Tensor(rng.standard_normal((3, 2)))
    g = T.finite_diff_grad(lambda: T.sum(x), x)
    assert np.max(np.abs(g - 1.0)) <= 1e-9


def test_finite_diff_of_square():
    x = Tensor([3.0])
    assert T.finite_diff_grad(lambda: T.sum(T.square(x)), x)[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_restores_input(rng):
    x = Tensor(rng.standard_normal(4))
    before = x.data.copy()
    T.finite_diff_grad(lambda: T.sum(T.gelu(x)), x)
    assert np.array_equal(x.data, before)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        T.finite_diff_grad(lambda: 0.0, Tensor([1.0]), h=0.0)


def test_two_layer_mlp_gradients_match_finite_differences(rng):
    x = Tensor(rng.standard_normal((4, 3)))
    w1, b1 = leaf(rng.standard_normal((3, 5))), leaf(rng.standard_normal(5))
    w2, b2 = leaf(rng.standard_normal((5, 2))), leaf(rng.standard_normal(2))
    labels = np.array([0, 1, 1, 0])

    def loss():
        return T.cross_entropy(T.gelu(x @ w1 + b1) @ w2 + b2, labels)

    T.backward(loss())
    for p in (w1, b1, w2, b2):
        assert T.relative_error(p.grad, T.finite_diff_grad(loss, p)) <= 1e-4


def test_relative_error_formula():
    assert T.relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert T.relative_error(np.array([1.0]), np.array([3.0])) == pytest.approx(0.5)


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((3, 4))
    run = lambda: T.layer_norm(T.gelu(Tensor(x)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data  # noqa: E731
    assert np.array_equal(run(), run())
