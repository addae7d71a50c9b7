import numpy as np
import pytest

from vbtta.errors import DomainError
from vbtta.optim import AdamConfig, AdamState, adam_step


def test_first_step_moves_by_learning_rate_against_gradient():
    params = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(params)
    adam_step(state, params, [np.array([0.5, -3.0])], AdamConfig(learning_rate=0.1))
    assert state.t == 1
    assert np.allclose(params[0], [0.9, -1.9], atol=1e-6)


def test_maximize_ascends():
    params = [np.array([0.0])]
    state = AdamState()
    adam_step(state, params, [np.array([2.0])], AdamConfig(learning_rate=0.05), maximize=True)
    assert params[0][0] == pytest.approx(0.05, abs=1e-6)


def test_adam_minimizes_quadratic():
    target = np.array([3.0, -1.0, 0.5])
    params = [np.zeros(3)]
    state = AdamState.zeros_like(params)
    config = AdamConfig(learning_rate=0.05)
    for _ in range(3000):
        adam_step(state, params, [2.0 * (params[0] - target)], config)
    assert np.allclose(params[0], target, atol=1e-2)


def test_zero_learning_rate_leaves_parameters():
    params = [np.array([1.0, 2.0])]
    state = AdamState.zeros_like(params)
    adam_step(state, params, [np.array([10.0, 10.0])], AdamConfig(learning_rate=0.0))
    assert np.array_equal(params[0], [1.0, 2.0])


def test_invalid_configuration():
    with pytest.raises(DomainError):
        AdamConfig(learning_rate=-1.0)
    with pytest.raises(DomainError):
        AdamConfig(beta1=1.0)
    with pytest.raises(DomainError):
        adam_step(AdamState(), [np.zeros(1)], [], AdamConfig())
