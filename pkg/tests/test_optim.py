import numpy as np
import pytest

from chromafuse.autodiff import Tensor
from chromafuse.optim import AdamState, adam_step

from oracles import adam_scalar_loops


def test_zero_gradient_leaves_parameters_unchanged():
    params = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    before = params["w"].data.copy()
    adam_step(params, {"w": np.zeros(3)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(params["w"].data, before)


def test_first_step_moves_by_learning_rate():
    params = {"w": Tensor(np.array([0.0, 1.0]), requires_grad=True)}
    state = AdamState(lr=0.05)
    adam_step(params, {"w": np.ones(2)}, state)
    # bias-corrected first step with unit gradient is lr/(1 + eps) in magnitude
    np.testing.assert_allclose(params["w"].data, np.array([0.0, 1.0]) - 0.05, atol=1e-8)
    assert state.step == 1


def test_quadratic_converges_and_matches_scalar_recurrence():
    params = {"x": Tensor(1.0, requires_grad=True)}
    state = AdamState(lr=0.1)
    for _ in range(200):
        adam_step(params, {"x": 2.0 * params["x"].data}, state)
    assert abs(float(params["x"].data)) < 1e-2
    want = adam_scalar_loops(lambda x: 2.0 * x, 1.0, lr=0.1, steps=200)
    assert float(params["x"].data) == pytest.approx(want, abs=1e-12)
    assert state.step == 200


def test_shape_mismatch_raises():
    params = {"w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(3)}, AdamState())


def test_missing_gradient_is_skipped():
    params = {"w": Tensor(np.ones(2), requires_grad=True)}
    state = AdamState(lr=0.5)
    adam_step(params, {}, state)
    np.testing.assert_array_equal(params["w"].data, np.ones(2))
    assert state.step == 1
