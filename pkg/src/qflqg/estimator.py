"""Controller-side state estimate and the quantization error process.

The controller never sees the noise itself, only the reproduction point
delivered by the selected quantizer; the filtered estimate is the
prediction plus that point, and the resulting estimation error evolves
autonomously (it does not depend on the applied inputs).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError
from .model import SystemModel


@dataclass(frozen=True)
class EstimatorState:
    """Estimate pair plus the (diagnostic-only) true estimation error.

    ``delta`` is maintained by the simulator for tests and audits; a real
    controller cannot observe it.
    """

    x_filtered: np.ndarray
    x_predicted: np.ndarray
    delta: np.ndarray


def initial_state(model: SystemModel) -> EstimatorState:
    zero = np.zeros(model.state_dim)
    return EstimatorState(
        x_filtered=model.init_mean.copy(),
        x_predicted=model.init_mean.copy(),
        delta=zero,
    )


def predict(state: EstimatorState, model: SystemModel, u) -> EstimatorState:
    """Advance the prediction through the plant model: x_pred' = A x_filt + B u."""
    u = np.asarray(u, dtype=float).reshape(-1)
    predicted = model.state_matrix @ state.x_filtered + model.input_matrix @ u
    return replace(state, x_predicted=predicted)


def correct(state: EstimatorState, received_centroid) -> EstimatorState:
    """Fold the received reproduction point into the estimate: x_filt = x_pred + what."""
    what = np.asarray(received_centroid, dtype=float).reshape(-1)
    return replace(state, x_filtered=state.x_predicted + what)


def propagate_error_cov(err_cov: np.ndarray, model: SystemModel, reduction: np.ndarray) -> np.ndarray:
    """One step of the estimation-error covariance: A C A' + (W - F).

    Raises:
        NumericalError: if the propagated covariance loses positive
            semidefiniteness beyond tolerance (an invalid reduction matrix).
    """
    a = model.state_matrix
    out = a @ np.asarray(err_cov, dtype=float) @ a.T + (model.noise_cov - np.asarray(reduction, dtype=float))
    out = 0.5 * (out + out.T)
    floor = -1e-10 * max(1.0, float(np.trace(model.noise_cov)) + float(np.trace(err_cov)))
    if np.linalg.eigvalsh(out).min() < floor:
        raise NumericalError("invalid quantizer reduction matrix (propagated error covariance not PSD)")
    return out
