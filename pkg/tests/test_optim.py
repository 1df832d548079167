import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from alcagcn import tensor as T
from alcagcn.optim import OptimizerState, adam_step, cosine_lr
from alcagcn.tensor import ContractError, NonFiniteError, Tensor


def test_zero_gradient_only_weight_decay():
    with T.precision(np.float64):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        state = OptimizerState(current_lr=1e-3, weight_decay=1e-6)
        adam_step({"p": p}, state, {"p": np.zeros(2)})
    np.testing.assert_allclose(p.data, np.array([1.0, -2.0]) * (1 - 1e-3 * 1e-6), rtol=0, atol=1e-15)
    assert state.step == 1


def test_first_step_moves_by_lr_against_sign():
    with T.precision(np.float64):
        p = Tensor(np.array([0.5, 0.5, 0.5]), requires_grad=True)
        state = OptimizerState(current_lr=1e-2, weight_decay=0.0)
        adam_step({"p": p}, state, {"p": np.array([3.0, -0.2, 1e-3])})
    np.testing.assert_allclose(p.data - 0.5, [-1e-2, 1e-2, -1e-2], rtol=1e-4)


def test_scalar_quadratic_converges():
    with T.precision(np.float64):
        w = Tensor(np.array(2.0), requires_grad=True)
        state = OptimizerState(current_lr=1e-2, weight_decay=0.0)
        for _ in range(200):
            w.zero_grad()
            with T.Tape() as tape:
                loss = (w - 3.0) * (w - 3.0)
            T.backward(loss, tape)
            adam_step({"w": w}, state)
    assert abs(float(w.data) - 3.0) < 0.05


def test_non_finite_gradient_rejected_without_side_effects():
    p = Tensor(np.ones(2), requires_grad=True)
    state = OptimizerState()
    with pytest.raises(NonFiniteError, match="p"):
        adam_step({"p": p}, state, {"p": np.array([1.0, np.nan])})
    np.testing.assert_array_equal(p.data, 1.0)
    assert state.step == 0 and not state.m


def test_moments_match_parameter_shapes():
    params = {"a": Tensor(np.ones((2, 3)), requires_grad=True), "b": Tensor(np.ones(4), requires_grad=True)}
    state = OptimizerState()
    adam_step(params, state, {"a": np.ones((2, 3)), "b": np.ones(4)})
    assert all(state.m[k].shape == params[k].shape == state.v[k].shape for k in params)


def test_adam_is_deterministic():
    def run():
        p = Tensor(np.linspace(-1, 1, 5), requires_grad=True)
        state = OptimizerState(current_lr=1e-2)
        g = np.random.default_rng(0)
        for _ in range(20):
            adam_step({"p": p}, state, {"p": g.normal(size=5).astype(np.float32)})
        return p.data.tobytes()
    assert run() == run()


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 1e-3) == 1e-3
    assert cosine_lr(100, 100, 1e-3) == pytest.approx(0.0, abs=1e-18)
    assert cosine_lr(50, 100, 1e-3) == pytest.approx(5e-4)


def test_cosine_lr_contract():
    with pytest.raises(ContractError):
        cosine_lr(0, 0, 1e-3)
    with pytest.raises(ContractError):
        cosine_lr(11, 10, 1e-3)


@given(st.integers(1, 300), st.floats(1e-6, 1.0))
def test_cosine_lr_monotone(total, base):
    values = [cosine_lr(e, total, base) for e in range(total + 1)]
    assert all(b <= a + 1e-15 for a, b in zip(values, values[1:]))
    assert all(0 <= v <= base for v in values)


def test_state_epoch_schedule():
    state = OptimizerState(base_lr=1e-3, total_epochs=4)
    lrs = [state.set_epoch(e) for e in range(4)]
    assert lrs[0] == 1e-3 and all(0 < lr <= 1e-3 for lr in lrs)
    assert lrs[2] == pytest.approx(0.5 * 1e-3 * (1 + math.cos(math.pi / 2)))
