import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from zscount import tensor as T
from zscount.tensor import ContractError, ShapeError


def test_matmul_examples():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal((T.tensor(np.eye(2)) @ a).data, a.data)
    assert np.array_equal((T.tensor([[1.0, 0.0], [0.0, 0.0]]) @ T.tensor([[5.0], [7.0]])).data, [[5.0], [0.0]])
    out = T.tensor(np.zeros((2, 3))) @ T.tensor(np.arange(12.0).reshape(3, 4))
    assert np.array_equal(out.data, np.zeros((2, 4)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.tensor(np.zeros((2, 3))) @ T.tensor(np.zeros((2, 3)))


def test_softmax_examples():
    assert np.allclose(T.softmax(T.tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3)
    assert np.allclose(T.softmax(T.tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)
    out = T.softmax(T.tensor([1000.0, 1000.0])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, [0.5, 0.5])


def test_softmax_bad_axis():
    with pytest.raises(ContractError):
        T.softmax(T.tensor(np.zeros((2, 2))), axis=2)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    y = T.softmax(T.tensor(x), axis=-1).data
    assert np.allclose(y.sum(axis=-1), 1.0) and np.all(y >= 0)


def test_layer_norm_examples():
    one, zero = T.tensor(np.ones(2)), T.tensor(np.zeros(2))
    assert np.array_equal(T.layer_norm(T.tensor([[3.0, 3.0]]), one, zero).data, [[0.0, 0.0]])
    assert np.allclose(T.layer_norm(T.tensor([[1.0, -1.0]]), one, zero, eps=1e-12).data, [[1.0, -1.0]])
    out = T.layer_norm(T.tensor([[4.0, -2.0]]), T.tensor(np.zeros(2)), T.tensor([2.5, 2.5]))
    assert np.array_equal(out.data, [[2.5, 2.5]])


def test_conv2d_examples():
    x = np.random.default_rng(0).standard_normal((1, 1, 5, 5))
    assert np.array_equal(T.conv2d(T.tensor(x), T.tensor(np.ones((1, 1, 1, 1)))).data, x)
    onehot = np.zeros((1, 1, 5, 5))
    onehot[0, 0, 2, 2] = 1.0
    out = T.conv2d(T.tensor(onehot), T.tensor(np.ones((1, 1, 3, 3)))).data[0, 0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    assert np.array_equal(out, expected)
    assert np.array_equal(T.conv2d(T.tensor(x), T.tensor(np.zeros((2, 1, 3, 3)))).data, np.zeros((1, 2, 5, 5)))


def test_conv2d_rejects_even_kernel_and_channel_mismatch():
    with pytest.raises(ContractError):
        T.conv2d(T.tensor(np.zeros((1, 1, 4, 4))), T.tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(ShapeError):
        T.conv2d(T.tensor(np.zeros((1, 2, 4, 4))), T.tensor(np.zeros((1, 3, 3, 3))))


def test_upsample_examples():
    assert np.array_equal(T.upsample2x_nearest(T.tensor([[[[1.0]]]])).data, np.ones((1, 1, 2, 2)))
    out = T.upsample2x_nearest(T.tensor([[[[1.0, 2.0]]]])).data[0, 0]
    assert np.array_equal(out, [[1, 1, 2, 2], [1, 1, 2, 2]])
    assert np.array_equal(T.upsample2x_nearest(T.tensor(np.zeros((1, 2, 3, 3)))).data, np.zeros((1, 2, 6, 6)))


def test_backward_examples():
    x = T.parameter([1.0, 2.0, 3.0])
    T.backward(x.sum())
    assert np.array_equal(x.grad, [1.0, 1.0, 1.0])
    y = T.parameter([2.0, -3.0])
    T.backward((y * y).sum())
    assert np.array_equal(y.grad, [4.0, -6.0])
    z = T.parameter([1.0, 2.0])
    d = z.detach()
    T.backward((z * 2.0).sum() + (d * 3.0).sum() * 0.0 + 0.0)
    assert d.grad is None


def test_backward_requires_scalar():
    with pytest.raises(ContractError):
        T.backward(T.parameter([1.0, 2.0]) * 2.0)


def test_gradients_accumulate_over_shared_subexpressions():
    x = T.parameter([3.0])
    y = x * x
    T.backward((y + y).sum())
    assert np.allclose(x.grad, [12.0])


def test_no_grad_builds_no_graph():
    x = T.parameter([1.0])
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_cosine_zero_norm_is_zero_with_zero_gradient():
    v = T.parameter(np.zeros((1, 2, 3)))
    t = T.parameter(np.array([[1.0, 0.0, 0.0]]))
    s = T.cosine_rows(v, t)
    assert np.array_equal(s.data, [[0.0, 0.0]])
    T.backward(s.sum())
    assert np.array_equal(v.grad, np.zeros((1, 2, 3)))


def test_masked_logsumexp_requires_nonempty_rows():
    with pytest.raises(ContractError):
        T.masked_logsumexp(T.tensor(np.zeros((1, 3))), np.zeros((1, 3), dtype=bool))


@given(arrays(np.float64, (2, 6), elements=st.floats(-30, 30)))
def test_masked_logsumexp_matches_direct_sum(x):
    mask = np.array([[True, False, True, True, False, False], [False] * 5 + [True]])
    got = T.masked_logsumexp(T.tensor(x), mask).data
    want = [math.log(sum(math.exp(v) for v, m in zip(row, mr) if m)) for row, mr in zip(x, mask)]
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_bias_broadcast_add():
    out = T.tensor(np.zeros((2, 3))) + T.tensor([1.0, 2.0, 3.0])
    assert np.array_equal(out.data, [[1, 2, 3], [1, 2, 3]])
    with pytest.raises(ShapeError):
        T.tensor(np.zeros((2, 3))) + T.tensor([1.0, 2.0])
