import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alcagcn import tensor as T
from alcagcn.gradcheck import check_function, primitive_checks
from alcagcn.tensor import ContractError, NonFiniteError, ShapeError, Tensor


def grads_of(fn, *leaves):
    with T.Tape() as tape:
        loss = fn(*leaves)
    T.backward(loss, tape)
    return [leaf.grad for leaf in leaves]


def test_matmul_identity_and_hand_case():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(T.matmul(np.eye(2), x).data, x)
    out = T.matmul([[1.0, 2.0], [3.0, 4.0]], [[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_gradient_matches_finite_differences(rng):
    res = check_function("matmul", T.matmul, {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(4, 2))})
    assert res.rel_error <= 1e-4


def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_lastdim([0.0, 0.0]).data, [0.5, 0.5])
    with np.errstate(over="raise"):
        out = T.softmax_lastdim([1000.0, 0.0]).data
    assert out[0] == pytest.approx(1.0) and out[1] == pytest.approx(0.0, abs=1e-30)


def test_softmax_jacobian(rng):
    assert check_function("softmax", T.softmax_lastdim, {"x": rng.normal(size=5)}).rel_error <= 1e-4


@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)))
def test_softmax_rows_are_distributions(x):
    with T.precision(np.float64):
        p = T.softmax_lastdim(x).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)


def test_backward_sum_gives_ones():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    (g,) = grads_of(T.sum_, w)
    np.testing.assert_array_equal(g, np.ones((2, 2)))


def test_backward_square_analytic():
    w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    (g,) = grads_of(lambda a: T.sum_(a * a), w)
    np.testing.assert_array_equal(g, [[2.0, 4.0], [6.0, 8.0]])


def test_reuse_accumulates():
    x = Tensor(3.0, requires_grad=True)
    (g,) = grads_of(lambda a: a + a, x)
    assert float(g) == 2.0


def test_backward_rejects_non_scalar_and_detached():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ContractError, match="scalar"):
        T.backward(y, tape)
    with pytest.raises(ContractError, match="detached"):
        T.backward(T.sum_(Tensor(np.ones(3))), T.Tape())


def test_tape_cleared_after_backward():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        loss = T.sum_(x * x)
    assert len(tape) == 2
    T.backward(loss, tape)
    assert len(tape) == 0


def test_no_grad_records_nothing():
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape, T.no_grad():
        T.sum_(x * x)
    assert len(tape) == 0


def test_non_finite_forward_is_an_error():
    with pytest.raises(NonFiniteError):
        T.log(Tensor([0.0]))


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.ones((0, 3)))


def test_grad_shape_matches_data():
    w = Tensor(np.ones((3, 2)), requires_grad=True)
    (g,) = grads_of(lambda a: T.sum_(T.relu(a)), w)
    assert g.shape == w.shape


@pytest.mark.parametrize("result", primitive_checks(seed=7), ids=lambda r: r.name)
def test_every_primitive_passes_finite_differences(result):
    assert result.passed, result.line()


def test_conv_time_output_length():
    x = np.ones((1, 2, 75, 3))
    w = np.zeros((4, 2, 3))
    assert T.conv_time(x, w, stride=1).shape == (1, 4, 75, 3)
    assert T.conv_time(x, w, stride=2).shape == (1, 4, 38, 3)
    assert T.conv_time(np.ones((1, 2, 38, 3)), w, stride=2).shape == (1, 4, 19, 3)


def test_conv_time_matches_direct_loop(rng):
    x = rng.normal(size=(2, 3, 6, 4))
    w = rng.normal(size=(5, 3, 3))
    b = rng.normal(size=5)
    with T.precision(np.float64):
        out = T.conv_time(x, w, b, stride=2).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (0, 0)))
    ref = np.zeros((2, 5, 3, 4))
    for t in range(3):
        window = xp[:, :, 2 * t:2 * t + 3]
        ref[:, :, t] = np.einsum("ncku,ock->nou", window, w) + b[None, :, None]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_graph_conv_matches_einsum(rng):
    x, a, w = rng.normal(size=(2, 3, 4, 5)), rng.normal(size=(3, 5, 5)), rng.normal(size=(3, 6, 3))
    with T.precision(np.float64):
        out = T.graph_conv(x, a, w).data
    np.testing.assert_allclose(out, np.einsum("nctj,kij,koc->noti", x, a, w), atol=1e-12)


def test_batch_norm_updates_running_buffers(rng):
    x = rng.normal(2.0, 3.0, size=(64, 2, 10))
    rm, rv = np.zeros(2), np.ones(2)
    with T.precision(np.float64):
        T.batch_norm(x, np.ones((1, 2, 1)), np.zeros((1, 2, 1)), (0, 2), rm, rv, training=True)
    assert np.all(rm > 0.1) and np.all(rv > 1.0)
    before = rm.copy()
    with T.precision(np.float64):
        T.batch_norm(x, np.ones((1, 2, 1)), np.zeros((1, 2, 1)), (0, 2), rm, rv, training=False)
    np.testing.assert_array_equal(rm, before)


def test_dropout_is_identity_in_eval_mode(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.dropout(x, 0.5, None, training=False) is x


def test_precision_context_restores_default():
    before = T.default_dtype()
    with T.precision(np.float64):
        assert Tensor(1.0).dtype == np.float64
    assert T.default_dtype() is before


def test_norm_lastdim_zero_vector_has_zero_subgradient():
    x = Tensor(np.zeros((1, 3)), requires_grad=True)
    (g,) = grads_of(lambda a: T.sum_(T.norm_lastdim(a)), x)
    np.testing.assert_array_equal(g, 0.0)
