import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from snowflake import ndtensor as nt
from snowflake.errors import ContractError, ShapeError
from snowflake.gradcheck import check_gradients, numeric_grad
from snowflake.ndtensor import Tensor

finite = st.floats(-50, 50, allow_nan=False)


def leaf(a):
    return Tensor(np.asarray(a, dtype=float), requires_grad=True)


# -- matmul -----------------------------------------------------------------------


def test_matmul_identity():
    out = nt.matmul(Tensor(np.eye(2)), Tensor([[1, 2], [3, 4]]))
    assert np.array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_dot():
    assert nt.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        nt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_grad_matches_central_differences(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = Tensor(rng.normal(size=(4, 2)))
    fn = lambda: nt.sum(nt.matmul(a, b))  # noqa: E731
    fn().backward()
    num = numeric_grad(fn, a, h=1e-6)
    rel = np.linalg.norm(a.grad.ravel() - num) / np.linalg.norm(num)
    assert rel < 1e-6


# -- elementwise ------------------------------------------------------------------


def test_tanh_at_zero():
    assert nt.tanh(Tensor(0.0)).item() == 0.0


@given(finite)
def test_tanh_strictly_inside_unit_interval(x):
    y = nt.tanh(Tensor(x)).item()
    assert -1.0 < y < 1.0


def test_tanh_saturated_input_stays_below_one():
    y = nt.tanh(Tensor([40.0, -40.0])).data
    assert np.all(np.abs(y) < 1.0)


def test_tanh_derivative_at_half():
    x = leaf(0.5)
    fn = lambda: nt.tanh(x)  # noqa: E731
    fn().backward()
    num = numeric_grad(fn, x, h=1e-6)[0]
    assert abs(x.grad - num) / abs(num) < 1e-8


@pytest.mark.parametrize("op", ["add", "sub", "mul"])
def test_binary_ops_match_numpy(op, rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(1, 4))
    ref = {"add": a + b, "sub": a - b, "mul": a * b}[op]
    assert np.array_equal(nt.elementwise(op, Tensor(a), Tensor(b)).data, ref)


@pytest.mark.parametrize("op", ["tanh", "relu", "exp", "neg"])
def test_unary_ops_match_numpy(op, rng):
    a = rng.normal(size=(5,))
    ref = {"tanh": np.tanh(a), "relu": np.maximum(a, 0), "exp": np.exp(a), "neg": -a}[op]
    assert np.array_equal(nt.elementwise(op, Tensor(a)).data, ref)


def test_non_broadcastable_shapes_raise():
    with pytest.raises(ShapeError):
        nt.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        nt.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(3)))  # rank mismatch is not implicit


def test_unknown_elementwise_op():
    with pytest.raises(ValueError):
        nt.elementwise("sqrt", Tensor(1.0))


def test_broadcast_row_gradient_is_summed(rng):
    x = leaf(rng.normal(size=(4, 3)))
    b = leaf(rng.normal(size=(1, 3)))
    nt.sum(nt.mul(nt.add(x, b), 2.0)).backward()
    assert np.allclose(b.grad, np.full((1, 3), 8.0))


# -- softmax ----------------------------------------------------------------------


def test_softmax_equal_logits():
    out = nt.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
    assert np.allclose(out, 1 / 3)


def test_softmax_large_logit_is_finite():
    out = nt.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0)


def test_softmax_grad_2x3(rng):
    x = leaf(rng.normal(size=(2, 3)))
    w = Tensor(rng.normal(size=(2, 3)))
    res = check_gradients(lambda: nt.sum(nt.mul(nt.softmax_rows(x), w)), [x])
    assert res.rel_error < 1e-6


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_sum_to_one(a):
    s = nt.softmax(Tensor(a), axis=-1).data.sum(axis=-1)
    assert np.all(np.abs(s - 1.0) < 1e-12)


# -- reductions and layout ----------------------------------------------------------


def test_max_axis0():
    assert nt.max(Tensor([[1, 5], [7, 2]]), axis=0).data.tolist() == [7.0, 5.0]


def test_max_ties_route_gradient_to_first():
    x = leaf([3.0, 3.0, 1.0])
    nt.max(x).backward()
    assert x.grad.tolist() == [1.0, 0.0, 0.0]


def test_gather_rows_in_requested_order():
    t = Tensor([[0, 0], [1, 1], [2, 2]])
    assert nt.gather(t, [2, 0]).data.tolist() == [[2, 2], [0, 0]]


def test_gather_out_of_range_names_value():
    with pytest.raises(IndexError, match="7"):
        nt.gather(Tensor(np.zeros((3, 2))), [0, 7])


def test_gather_backward_accumulates_duplicates():
    x = leaf(np.zeros((3, 2)))
    nt.sum(nt.gather(x, [1, 1, 2])).backward()
    assert x.grad.tolist() == [[0, 0], [2, 2], [1, 1]]


def test_gather_nonzero_axis_backward(rng):
    x = leaf(rng.normal(size=(2, 4)))
    w = Tensor(rng.normal(size=(2, 3)))
    res = check_gradients(lambda: nt.sum(nt.mul(nt.gather(x, [3, 0, 3], axis=1), w)), [x])
    assert res.rel_error < 1e-8


def test_sum_backward_is_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    nt.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


@pytest.mark.parametrize("op", ["sum", "mean", "max"])
@pytest.mark.parametrize("axis", [None, 0, 1])
def test_reduce_matches_numpy(op, axis, rng):
    a = rng.normal(size=(3, 4))
    ref = getattr(np, op)(a, axis=axis)
    assert np.allclose(nt.reduce(op, Tensor(a), axis=axis).data, ref)


def test_concat_reshape_transpose_repeat_grads(rng):
    a, b = leaf(rng.normal(size=(2, 3))), leaf(rng.normal(size=(4, 3)))
    w = Tensor(rng.normal(size=(3, 12)))

    def fn():
        c = nt.concat([a, b], axis=0)  # 6 x 3
        c = nt.transpose(nt.reshape(c, (3, 6)))  # 6 x 3
        c = nt.repeat(c, 2, axis=0)  # 12 x 3
        return nt.sum(nt.mul(nt.transpose(c), w))

    assert check_gradients(fn, [a, b]).rel_error < 1e-8


def test_repeat_layout():
    out = nt.repeat(Tensor([[1.0], [2.0]]), 3).data.ravel().tolist()
    assert out == [1, 1, 1, 2, 2, 2]


def test_concat_shape_error():
    with pytest.raises(ShapeError):
        nt.concat([Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))], axis=0)


# -- backward ---------------------------------------------------------------------


def test_backward_sum_2x2():
    x = leaf(np.ones((2, 2)))
    nt.sum(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 2)))


def test_backward_twice_doubles():
    x = leaf(np.array([1.0, 2.0]))
    loss = nt.sum(nt.mul(x, x))
    loss.backward()
    first = x.grad.copy()
    loss.backward()
    assert np.array_equal(x.grad, 2 * first)


def test_backward_non_scalar_raises():
    with pytest.raises(ContractError):
        nt.mul(leaf([1.0, 2.0]), 2.0).backward()


def test_sum_tanh_wx_grad(rng):
    w = leaf(rng.normal(size=(3, 4)))
    x = Tensor(rng.normal(size=(4, 2)))
    assert check_gradients(lambda: nt.sum(nt.tanh(nt.matmul(w, x))), [w]).rel_error < 1e-5


def test_shared_subgraph_gradient(rng):
    # y = x*x + x used twice; topological accumulation must count both paths once each
    x = leaf(rng.normal(size=(3,)))

    def fn():
        y = nt.add(nt.mul(x, x), x)
        return nt.sum(nt.mul(y, y))

    assert check_gradients(fn, [x]).rel_error < 1e-8


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with nt.no_grad():
        y = nt.mul(x, 3.0)
    assert not y.requires_grad


def test_deep_chain_does_not_recurse():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = nt.add(y, 0.0)
    nt.sum(y).backward()
    assert x.grad.tolist() == [1.0]


@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_linearity_of_sum_gradient(a):
    x = leaf(a)
    nt.sum(nt.mul(x, 5.0)).backward()
    assert np.array_equal(x.grad, np.full((3, 4), 5.0))
