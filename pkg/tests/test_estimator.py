"""Receiver-side estimate arithmetic and the error-covariance step."""

import numpy as np
import pytest

from qflqg import (
    NumericalError,
    SystemModel,
    correct,
    initial_state,
    predict,
    propagate_error_cov,
)


@pytest.fixture
def model():
    return SystemModel(
        state_matrix=[[0.9, 0.2], [0.0, 0.7]],
        input_matrix=[[0.1, 0.0], [0.0, 0.15]],
        noise_cov=(0.25 * np.eye(2)).tolist(),
        init_mean=[1.0, -2.0],
        init_cov=np.eye(2).tolist(),
        state_weight=(0.5 * np.eye(2)).tolist(),
        terminal_weight=(0.5 * np.eye(2)).tolist(),
        input_weight=(0.5 * np.eye(2)).tolist(),
        horizon=3,
        quantizer_costs=[0.0],
    )


def test_initial_state_centers_on_prior_mean(model):
    s = initial_state(model)
    np.testing.assert_array_equal(s.x_filtered, [1.0, -2.0])
    np.testing.assert_array_equal(s.x_predicted, [1.0, -2.0])
    np.testing.assert_array_equal(s.delta, [0.0, 0.0])


def test_predict_by_hand(model):
    # x = (1, 1), u = (2, -1):
    #   A x = (0.9 + 0.2, 0.7) = (1.1, 0.7)
    #   B u = (0.2, -0.15)
    #   prediction = (1.3, 0.55)
    s = initial_state(model)
    s = correct(s, [0.0, 3.0])  # filtered = predicted + (0, 3) = (1, 1)
    s = predict(s, model, [2.0, -1.0])
    np.testing.assert_allclose(s.x_filtered, [1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(s.x_predicted, [1.3, 0.55], atol=1e-15)


def test_correct_adds_reproduction_point(model):
    s = initial_state(model)
    s = predict(s, model, [0.0, 0.0])
    s2 = correct(s, [0.25, -0.5])
    np.testing.assert_allclose(s2.x_filtered, s.x_predicted + [0.25, -0.5], atol=1e-15)
    np.testing.assert_array_equal(s2.x_predicted, s.x_predicted)


def test_propagate_error_cov_scalar_by_hand():
    # C = 0.05, A = 2, W = 0.25, F = 1/(2 pi):
    #   A C A' = 0.2,  out = 0.2 + 0.25 - 0.159154... = 0.290845...
    model = SystemModel(
        state_matrix=[[2.0]],
        input_matrix=[[1.0]],
        noise_cov=[[0.25]],
        init_mean=[0.0],
        init_cov=[[1.0]],
        state_weight=[[1.0]],
        terminal_weight=[[1.0]],
        input_weight=[[1.0]],
        horizon=1,
        quantizer_costs=[0.0],
    )
    out = propagate_error_cov([[0.05]], model, [[1.0 / (2.0 * np.pi)]])
    assert out[0, 0] == pytest.approx(0.45 - 1.0 / (2.0 * np.pi), abs=1e-14)


def test_propagate_error_cov_stays_symmetric(model):
    c = np.array([[0.3, 0.1], [0.1, 0.2]])
    out = propagate_error_cov(c, model, 0.05 * np.eye(2))
    np.testing.assert_array_equal(out, out.T)


def test_propagate_rejects_oversized_reduction(model):
    with pytest.raises(NumericalError, match="not PSD"):
        propagate_error_cov(np.zeros((2, 2)), model, np.eye(2))
