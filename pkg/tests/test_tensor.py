import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from msdiffseg import tensor as tc
from msdiffseg.errors import ContractError, DimensionError, NumericalError
from msdiffseg.tensor import Tensor, backward, fd_check, grad

from oracles import bilinear_scalar, conv2d_loops, matmul_loops

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


def mat(rows, cols):
    return hnp.arrays(np.float64, (rows, cols), elements=finite)


# construction


def test_tensor_is_immutable_float64():
    t = Tensor([[1, 2], [3, 4.5]])
    assert t.data.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0, 0] = 7.0


def test_integer_data_stays_integer():
    assert Tensor(np.array([1, 2, 3])).data.dtype == np.int64


def test_non_finite_results_raise():
    with pytest.raises(NumericalError):
        tc.exp(Tensor([1000.0]))
    with pytest.raises(NumericalError):
        tc.log(Tensor([0.0, 1.0]))


# matmul


def test_matmul_hand_value():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(tc.matmul(a, b).data, [[19, 22], [43, 50]])


def test_matmul_identity_and_zero():
    x = np.random.default_rng(0).standard_normal((2, 3))
    np.testing.assert_array_equal(tc.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)
    np.testing.assert_array_equal(tc.matmul(Tensor(x), Tensor(np.zeros((3, 4)))).data, 0.0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.data())
def test_matmul_matches_triple_loop(n, k, m, data):
    a, b = data.draw(mat(n, k)), data.draw(mat(k, m))
    np.testing.assert_allclose(tc.matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)


# softmax


def test_softmax_examples():
    np.testing.assert_allclose(tc.softmax_axis(Tensor([0.0, 0.0]), 0).data, [0.5, 0.5])
    np.testing.assert_allclose(
        tc.softmax_axis(Tensor(np.log([1.0, 2.0, 3.0])), 0).data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15
    )


def test_softmax_bad_axis():
    with pytest.raises(IndexError):
        tc.softmax_axis(Tensor(np.zeros((2, 2))), 2)


@given(hnp.arrays(np.float64, (3, 4), elements=finite), st.floats(-50, 50), st.integers(0, 1))
def test_softmax_shift_invariant_and_normalized(x, c, axis):
    p = tc.softmax_axis(Tensor(x), axis).data
    np.testing.assert_allclose(tc.softmax_axis(Tensor(x + c), axis).data, p, atol=1e-12)
    np.testing.assert_allclose(p.sum(axis=axis), 1.0, atol=1e-12)
    assert np.all(p > 0)


def test_softmax_large_inputs_do_not_overflow():
    p = tc.softmax_axis(Tensor([1000.0, 1000.0]), 0).data
    np.testing.assert_allclose(p, [0.5, 0.5])


# concat


def test_concat_examples():
    np.testing.assert_array_equal(tc.concat_axis(Tensor([1.0, 2.0]), Tensor([3.0]), 0).data, [1, 2, 3])
    x = Tensor(np.ones((2, 3)))
    np.testing.assert_array_equal(tc.concat_axis(x, Tensor(np.zeros((2, 0))), 1).data, x.data)
    assert tc.concat_axis(x, Tensor(np.ones((2, 5))), 1).shape == (2, 8)


def test_concat_mismatch():
    with pytest.raises(DimensionError):
        tc.concat_axis(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))), 1)


@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
def test_concat_split_round_trip(a, b, rows):
    rng = np.random.default_rng(a * 10 + b)
    x, y = rng.standard_normal((rows, a)), rng.standard_normal((rows, b))
    joined = tc.concat([Tensor(x), Tensor(y)], axis=1)
    left, right = tc.split_axis(joined, [a, b], axis=1)
    np.testing.assert_array_equal(left.data, x)
    np.testing.assert_array_equal(right.data, y)


# bilinear resize


def test_resize_constant_and_identity():
    x = Tensor(np.full((2, 3, 5), 1.7))
    np.testing.assert_allclose(tc.bilinear_resize(x, 7, 2).data, 1.7, atol=1e-15)
    y = Tensor(np.random.default_rng(1).standard_normal((2, 4, 4)))
    np.testing.assert_array_equal(tc.bilinear_resize(y, 4, 4).data, y.data)


def test_resize_two_to_four_frozen():
    # scalar half-pixel reference interpolator: [0, 1] -> [0, .25, .75, 1]
    out = tc.bilinear_resize(Tensor([[[0.0, 1.0]]]), 1, 4).data
    np.testing.assert_allclose(out, [[[0.0, 0.25, 0.75, 1.0]]], atol=1e-15)


def test_resize_to_empty_rejected():
    with pytest.raises(DimensionError):
        tc.bilinear_resize(Tensor(np.zeros((1, 2, 2))), 0, 2)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 9), st.integers(1, 9))
def test_resize_matches_scalar_reference(h, w, oh, ow):
    x = np.random.default_rng(h * 100 + w).standard_normal((2, h, w))
    np.testing.assert_allclose(tc.bilinear_resize(Tensor(x), oh, ow).data, bilinear_scalar(x, oh, ow), atol=1e-12)


# conv2d


def test_conv_identity_and_zero_kernels():
    x = Tensor(np.random.default_rng(2).standard_normal((1, 4, 4)))
    np.testing.assert_array_equal(tc.conv2d(x, Tensor(np.ones((1, 1, 1, 1)))).data, x.data)
    np.testing.assert_array_equal(tc.conv2d(x, Tensor(np.zeros((3, 1, 3, 3))), padding=1).data, 0.0)


def test_conv_ones_on_constant_frozen():
    out = tc.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), padding=1).data[0]
    expected = np.array(
        [
            [4, 6, 6, 6, 4],
            [6, 9, 9, 9, 6],
            [6, 9, 9, 9, 6],
            [6, 9, 9, 9, 6],
            [4, 6, 6, 6, 4],
        ],
        dtype=float,
    )
    np.testing.assert_array_equal(out, expected)


def test_conv_rejects_even_kernel_and_fractional_extent():
    x = Tensor(np.zeros((1, 4, 4)))
    with pytest.raises(DimensionError):
        tc.conv2d(x, Tensor(np.zeros((1, 1, 2, 2))))
    with pytest.raises(DimensionError):
        tc.conv2d(x, Tensor(np.zeros((1, 1, 3, 3))), stride=2, padding=1)
    with pytest.raises(DimensionError):
        tc.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))))


@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 3]), st.integers(3, 6), st.integers(0, 1))
def test_conv_matches_sliding_window_oracle(cin, cout, k, size, pad):
    rng = np.random.default_rng(cin * 7 + cout * 3 + k + size)
    x = rng.standard_normal((cin, size, size))
    w = rng.standard_normal((cout, cin, k, k))
    np.testing.assert_allclose(
        tc.conv2d(Tensor(x), Tensor(w), padding=pad).data, conv2d_loops(x, w, padding=pad), atol=1e-12
    )


# gradients


def test_grad_sum_of_squares():
    x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
    (g,) = grad(tc.tsum(tc.square(x)), [x])
    np.testing.assert_allclose(g.data, [2.0, -4.0, 6.0])


def test_softmax_cross_entropy_gradient_is_p_minus_y():
    y = np.array([0.0, 1.0, 0.0])
    x = Tensor([0.3, -1.2, 2.0], requires_grad=True)
    loss = -tc.tsum(tc.log(tc.softmax_axis(x, 0)) * Tensor(y))
    (g,) = grad(loss, [x])
    p = np.exp(x.data) / np.exp(x.data).sum()
    np.testing.assert_allclose(g.data, p - y, atol=1e-12)


def test_fd_check_linear_and_quadratic():
    x = Tensor(np.random.default_rng(3).standard_normal(6))
    assert fd_check(lambda v: tc.tsum(v), x) < 1e-10
    assert fd_check(lambda v: tc.tsum(v * v), x) <= 1e-6


@pytest.mark.parametrize("seed", range(5))
def test_fd_check_matmul_chain(seed):
    rng = np.random.default_rng(seed)
    b, c = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((4, 2)))
    x = Tensor(rng.standard_normal((2, 3)))
    assert fd_check(lambda a: tc.tsum(tc.square(tc.matmul(tc.matmul(a, b), c))), x) <= 1e-4


@pytest.mark.parametrize(
    "op",
    [
        lambda v: tc.exp(v * 0.5),
        lambda v: tc.silu(v),
        lambda v: tc.softmax_axis(v, 1),
        lambda v: tc.bilinear_resize(v, 5, 3),
        lambda v: tc.transpose(v, (1, 0, 2)),
        lambda v: tc.getitem(v, (slice(None), 1)),
        lambda v: tc.getitem(v, (np.array([0, 0]), 0)),
        lambda v: tc.mean(v, axis=2, keepdims=True) - v,
        lambda v: tc.power(tc.clamp_min(v, -10) * v + 1.0, 1.5),
        lambda v: v / (tc.square(v) + 1.0),
    ],
)
def test_fd_check_elementary_ops(op):
    x = Tensor(np.random.default_rng(4).standard_normal((2, 3, 4)))
    w = np.random.default_rng(5).standard_normal(op(x).shape)
    assert fd_check(lambda v: tc.tsum(op(v) * Tensor(w)), x) <= 1e-6


def test_fd_check_conv_both_arguments():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 5, 5)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    w = Tensor(rng.standard_normal((3, 5, 5)))
    assert fd_check(lambda v: tc.tsum(tc.conv2d(v, k, padding=1) * w), x) <= 1e-6
    assert fd_check(lambda v: tc.tsum(tc.conv2d(x, v, padding=1) * w), k) <= 1e-6
    w2 = Tensor(rng.standard_normal((3, 2, 2)))
    assert fd_check(lambda v: tc.tsum(tc.conv2d(v, k, stride=2) * w2), x) <= 1e-6


def test_broadcast_gradients_are_reduced():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.full((1, 4), 2.0), requires_grad=True)
    ga, gb = grad(tc.tsum(a * b), [a, b])
    assert ga.shape == (3, 4) and gb.shape == (1, 4)
    np.testing.assert_allclose(gb.data, 3.0)


def test_shared_subexpression_accumulates():
    x = Tensor([3.0], requires_grad=True)
    y = x * x
    (g,) = grad(tc.tsum(y + y), [x])
    np.testing.assert_allclose(g.data, [12.0])


def test_backward_requires_scalar_root():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(x * 2.0)


def test_unreached_tensor_gets_zero_gradient():
    x = Tensor([1.0, 2.0], requires_grad=True)
    unused = Tensor([5.0], requires_grad=True)
    gx, gu = grad(tc.tsum(x), [x, unused])
    np.testing.assert_array_equal(gu.data, [0.0])


def test_tape_orders_parents_before_children():
    x = Tensor([1.0], requires_grad=True)
    y = tc.exp(x) * x + x
    tape = tc.Tape.from_root(tc.tsum(y))
    pos = {n.node_id: i for i, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for pid in n.input_ids:
            if pid is not None and pid in pos:
                assert pos[pid] < pos[n.node_id]
    assert [leaf.node_id for leaf in tape.leaves()] == [x.node_id]


@given(hnp.arrays(np.float64, (4,), elements=st.floats(-3, 3)))
def test_gradient_of_log_sum_exp_is_softmax(x):
    v = Tensor(x, requires_grad=True)
    (g,) = grad(tc.log(tc.tsum(tc.exp(v))), [v])
    np.testing.assert_allclose(g.data, np.exp(x) / np.exp(x).sum(), atol=1e-12)
    assert math.isclose(g.data.sum(), 1.0, abs_tol=1e-12)
