import numpy as np
import pytest

from kdkit.errors import ParameterError
from kdkit.optim import AdamW, OptimizerState, adamw_step, init_state, linear_schedule
from kdkit.tensor import parameter


def test_zero_gradient_without_decay_is_a_no_op():
    params = {"w": parameter(np.array([1.0, -2.0]))}
    state = init_state(params, lr=0.1, weight_decay=0.0)
    adamw_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"].data, [1.0, -2.0])


def test_first_step_moves_by_learning_rate():
    params = {"theta": parameter(np.array([0.5]))}
    state = init_state(params, lr=0.1, betas=(0.9, 0.999), weight_decay=0.0)
    adamw_step(params, {"theta": np.array([1.0])}, state)
    assert params["theta"].data[0] == pytest.approx(0.4, abs=1e-6)
    assert state.step == 1


def test_decoupled_decay_is_a_multiplicative_shrink():
    params = {"w": parameter(np.array([2.0, -4.0]))}
    state = init_state(params, lr=0.1, weight_decay=0.5)
    adamw_step(params, {}, state)
    assert np.allclose(params["w"].data, [2.0 * 0.95, -4.0 * 0.95])


def test_adamw_class_uses_tensor_gradients():
    w = parameter(np.array([1.0, 1.0]))
    optimizer = AdamW({"w": w}, lr=0.01, weight_decay=0.0)
    w.grad = np.array([1.0, -1.0])
    optimizer.step()
    assert w.data[0] < 1.0 < w.data[1]
    optimizer.zero_grad()
    assert w.grad is None


def test_float32_parameters_stay_float32():
    w = parameter(np.ones(3, dtype=np.float32))
    AdamW({"w": w}).step()
    assert w.dtype == np.float32


def test_invalid_settings():
    with pytest.raises(ParameterError):
        OptimizerState(betas=(1.0, 0.999))
    with pytest.raises(ParameterError):
        OptimizerState(eps=0.0)


def test_linear_schedule_warms_up_then_decays():
    lrs = [linear_schedule(step, 100, 1.0) for step in range(100)]
    assert lrs[0] == pytest.approx(0.1)
    assert lrs[9] == pytest.approx(1.0)
    assert lrs[10] == pytest.approx(1.0)
    assert lrs[55] == pytest.approx(0.5)
    assert lrs[99] == pytest.approx(1.0 / 90)
    assert all(a >= b for a, b in zip(lrs[10:], lrs[11:]))


def test_schedule_without_warmup():
    assert linear_schedule(0, 10, 2.0, warmup_frac=0.0) == 2.0
    assert linear_schedule(5, 0, 2.0) == 2.0
