import numpy as np
import pytest

from dcn.autograd import Tensor
from dcn.errors import NonFiniteError
from dcn.optim import Adam, AdamState, adam_step


def test_zero_gradient_leaves_params_unchanged():
    params = {"w": Tensor(np.array([1.5, -2.0]))}
    state = AdamState(lr=0.1)
    for _ in range(5):
        adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"].data, [1.5, -2.0])
    assert state.step == 5


def test_first_step_closed_form():
    params = {"w": Tensor(np.array([0.0]), dtype=np.float64)}
    adam_step(params, {"w": np.array([1.0])}, AdamState(lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8))
    # m_hat = v_hat = 1 after bias correction
    assert params["w"].data[0] == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)


def test_independent_parameters():
    params = {"a": Tensor(np.zeros(1), dtype=np.float64), "b": Tensor(np.zeros(1), dtype=np.float64)}
    state = AdamState(lr=0.1)
    adam_step(params, {"a": np.array([1.0]), "b": np.array([0.0])}, state)
    assert params["a"].data[0] < 0
    assert params["b"].data[0] == 0


def test_two_steps_against_reference_recurrence():
    g1, g2, lr, b1, b2, eps = 0.5, -0.25, 0.01, 0.9, 0.999, 1e-8
    m1, v1 = (1 - b1) * g1, (1 - b2) * g1 ** 2
    p1 = -lr * (m1 / (1 - b1)) / (np.sqrt(v1 / (1 - b2)) + eps)
    m2, v2 = b1 * m1 + (1 - b1) * g2, b2 * v1 + (1 - b2) * g2 ** 2
    p2 = p1 - lr * (m2 / (1 - b1 ** 2)) / (np.sqrt(v2 / (1 - b2 ** 2)) + eps)

    params = {"w": Tensor(np.zeros(1), dtype=np.float64)}
    state = AdamState(lr=lr)
    adam_step(params, {"w": np.array([g1])}, state)
    adam_step(params, {"w": np.array([g2])}, state)
    assert params["w"].data[0] == pytest.approx(p2, rel=1e-12)


def test_non_finite_gradient_names_parameter():
    params = {"conv.weight": Tensor(np.zeros(2))}
    state = AdamState()
    with pytest.raises(NonFiniteError, match="conv.weight"):
        adam_step(params, {"conv.weight": np.array([np.nan, 0.0])}, state)
    assert state.step == 0


def test_adam_wrapper_minimises_quadratic():
    w = Tensor(np.array([3.0, -2.0]), requires_grad=True, dtype=np.float64)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        ((w * w).sum()).backward()
        opt.step()
    assert np.abs(w.data).max() < 0.05
