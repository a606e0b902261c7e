"""Plant description and the offline recursions of quantized-feedback LQG.

The controlled system is

    x[t+1] = A x[t] + B u[t] + w[t],        w[t] ~ N(0, W),
    x[0]   = mu0 + w[-1],                   w[-1] ~ N(0, S0),

with the finite-horizon quadratic criterion

    J = E[ sum_t ( x[t]' Q1 x[t] + u[t]' R u[t] + cost(theta[t]) ) + x[T]' Q2 x[T] ].

Certainty-equivalent control is optimal here: the gains come from the
standard backward Riccati recursion and are independent of how (or how
coarsely) the noise is fed back.  What quantization *does* touch is the
estimation-error term of the cost, which is weighted by the matrices
computed in :func:`solve_control_riccati` and
:func:`solve_selection_recursions`:

    gain:        L[k] = (R + B' P[k+1] B)^-1 B' P[k+1] A
    cost-to-go:  P[k] = Q1 + A' P[k+1] A - L[k]' (R + B' P[k+1] B) L[k],  P[T] = Q2
    error wt:    N[k] = L[k]' (R + B' P[k+1] B) L[k]
    offset:      r[k] = r[k+1] + tr(P[k+1] W),                            r[T] = 0

    future wt:   Pi[k]  = A' (Pi[k+1] + N[k]) A,                          Pi[T] = 0
    uncontrolled Up[k]  = A' Up[k+1] A + Q1,                              Up[T] = Q2
    selection wt Om[k]  = Pi[k+1] + N[k]  ( = Up[k] - P[k] )

``Om[k]`` is the weight the optimal schedule puts on the one-step error
covariance when scoring quantizers, and the identity ``Om = Up - P``
doubles as a cross-check between the two recursions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NumericalError

_PSD_TOL = 1e-10
_RCOND_MIN = 1e-12


def _as_matrix(value, rows: int, cols: int, field: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.shape != (rows, cols):
        raise ConfigError(f"{field}: expected shape {(rows, cols)}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{field}: non-finite entries")
    return arr


def _check_symmetric_psd(mat: np.ndarray, field: str, positive_definite: bool = False) -> None:
    if not np.allclose(mat, mat.T, atol=1e-9):
        raise ConfigError(f"{field}: matrix is not symmetric")
    eigs = np.linalg.eigvalsh(mat)
    floor = _PSD_TOL * max(1.0, float(np.trace(mat)))
    if positive_definite:
        if eigs.min() <= floor:
            raise ConfigError(f"{field}: matrix is not positive definite")
    elif eigs.min() < -floor:
        raise ConfigError(f"{field}: matrix is not positive semidefinite")


@dataclass(frozen=True)
class SystemModel:
    """Immutable description of the plant, the cost, and the horizon.

    Attributes:
        state_matrix: n x n transition matrix.
        input_matrix: n x m input map.
        noise_cov: n x n process-noise covariance (symmetric PSD).
        init_mean: length-n mean of the initial state.
        init_cov: n x n covariance of the initial-state deviation.
        state_weight: n x n stage cost weight on the state (PSD).
        terminal_weight: n x n terminal cost weight (PSD).
        input_weight: m x m stage cost weight on the input (PD).
        horizon: number of control steps T.
        quantizer_costs: length-M vector of per-use quantizer prices.
    """

    state_matrix: np.ndarray
    input_matrix: np.ndarray
    noise_cov: np.ndarray
    init_mean: np.ndarray
    init_cov: np.ndarray
    state_weight: np.ndarray
    terminal_weight: np.ndarray
    input_weight: np.ndarray
    horizon: int
    quantizer_costs: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.state_matrix, dtype=float)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ConfigError(f"model.state_matrix: expected a square matrix, got shape {a.shape}")
        n = a.shape[0]
        b = np.asarray(self.input_matrix, dtype=float)
        if b.ndim != 2 or b.shape[0] != n:
            raise ConfigError(
                f"model.input_matrix: expected {n} rows to match the state dimension, got shape {b.shape}"
            )
        m = b.shape[1]
        object.__setattr__(self, "state_matrix", _as_matrix(a, n, n, "model.state_matrix"))
        object.__setattr__(self, "input_matrix", _as_matrix(b, n, m, "model.input_matrix"))
        object.__setattr__(self, "noise_cov", _as_matrix(self.noise_cov, n, n, "model.noise_cov"))
        object.__setattr__(self, "init_cov", _as_matrix(self.init_cov, n, n, "model.init_cov"))
        object.__setattr__(self, "state_weight", _as_matrix(self.state_weight, n, n, "model.state_weight"))
        object.__setattr__(
            self, "terminal_weight", _as_matrix(self.terminal_weight, n, n, "model.terminal_weight")
        )
        object.__setattr__(self, "input_weight", _as_matrix(self.input_weight, m, m, "model.input_weight"))
        mean = np.asarray(self.init_mean, dtype=float).reshape(-1)
        if mean.shape != (n,):
            raise ConfigError(f"model.init_mean: expected length {n}, got {mean.shape}")
        object.__setattr__(self, "init_mean", mean)
        costs = np.asarray(self.quantizer_costs, dtype=float).reshape(-1)
        if costs.size < 1:
            raise ConfigError("model.quantizer_costs: at least one quantizer price required")
        if np.any(costs < 0) or not np.all(np.isfinite(costs)):
            raise ConfigError("model.quantizer_costs: prices must be finite and nonnegative")
        object.__setattr__(self, "quantizer_costs", costs)
        if int(self.horizon) < 1:
            raise ConfigError(f"model.horizon: must be a positive integer, got {self.horizon}")
        object.__setattr__(self, "horizon", int(self.horizon))
        _check_symmetric_psd(self.noise_cov, "model.noise_cov")
        _check_symmetric_psd(self.init_cov, "model.init_cov")
        _check_symmetric_psd(self.state_weight, "model.state_weight")
        _check_symmetric_psd(self.terminal_weight, "model.terminal_weight")
        _check_symmetric_psd(self.input_weight, "model.input_weight", positive_definite=True)

    @property
    def state_dim(self) -> int:
        return self.state_matrix.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_matrix.shape[1]

    @property
    def n_quantizers(self) -> int:
        return self.quantizer_costs.size


@dataclass(frozen=True)
class RiccatiSolution:
    """Time-indexed output of the backward recursions.

    Attributes:
        cost_to_go: (T+1, n, n) value-function weights, terminal entry equals
            the terminal cost weight.
        gain: (T, m, n) feedback gains; the control law is u = -gain[k] @ estimate.
        error_weight: (T, n, n) weights the cost puts on the estimation error
            at each step.
        noise_offset: (T+1,) accumulated noise-induced cost floor.
        future_error_weight: (T+1, n, n) backward accumulation of error weights
            through the dynamics, or None until the selection recursions run.
        uncontrolled_cost: (T+1, n, n) cost-to-go of the zero-input system, or None.
        selection_weight: (T, n, n) weight applied to the residual noise
            covariance when scoring quantizer choices, or None.
    """

    cost_to_go: np.ndarray
    gain: np.ndarray
    error_weight: np.ndarray
    noise_offset: np.ndarray
    future_error_weight: np.ndarray | None = None
    uncontrolled_cost: np.ndarray | None = None
    selection_weight: np.ndarray | None = None


def _symmetrize(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def solve_control_riccati(model: SystemModel) -> RiccatiSolution:
    """Run the backward control recursion for gains and cost-to-go weights.

    Args:
        model: validated plant/cost description.

    Returns:
        RiccatiSolution with ``cost_to_go``, ``gain``, ``error_weight`` and
        ``noise_offset`` populated (selection fields left as None).

    Raises:
        NumericalError: if an input-weight solve is ill-conditioned.
    """
    a, b = model.state_matrix, model.input_matrix
    n, m, horizon = model.state_dim, model.input_dim, model.horizon

    cost_to_go = np.empty((horizon + 1, n, n))
    gain = np.empty((horizon, m, n))
    error_weight = np.empty((horizon, n, n))
    noise_offset = np.zeros(horizon + 1)

    cost_to_go[horizon] = model.terminal_weight
    for k in range(horizon - 1, -1, -1):
        ahead = cost_to_go[k + 1]
        curvature = _symmetrize(model.input_weight + b.T @ ahead @ b)
        rcond = 1.0 / np.linalg.cond(curvature)
        if not np.isfinite(rcond) or rcond < _RCOND_MIN:
            raise NumericalError(f"ill-conditioned Riccati step at k={k} (rcond={rcond:.2e})")
        gain[k] = np.linalg.solve(curvature, b.T @ ahead @ a)
        error_weight[k] = _symmetrize(gain[k].T @ curvature @ gain[k])
        cost_to_go[k] = _symmetrize(model.state_weight + a.T @ ahead @ a - error_weight[k])
        noise_offset[k] = noise_offset[k + 1] + float(np.trace(ahead @ model.noise_cov))
    return RiccatiSolution(
        cost_to_go=cost_to_go,
        gain=gain,
        error_weight=error_weight,
        noise_offset=noise_offset,
    )


def solve_selection_recursions(model: SystemModel, ricc: RiccatiSolution) -> RiccatiSolution:
    """Fill the selection-scoring weights on top of a control solution.

    Args:
        model: plant description.
        ricc: output of :func:`solve_control_riccati`.

    Returns:
        A new RiccatiSolution with ``future_error_weight``,
        ``uncontrolled_cost`` and ``selection_weight`` populated.
    """
    a = model.state_matrix
    n, horizon = model.state_dim, model.horizon

    future = np.empty((horizon + 1, n, n))
    uncontrolled = np.empty((horizon + 1, n, n))
    selection = np.empty((horizon, n, n))

    future[horizon] = np.zeros((n, n))
    uncontrolled[horizon] = model.terminal_weight
    for k in range(horizon - 1, -1, -1):
        selection[k] = _symmetrize(future[k + 1] + ricc.error_weight[k])
        future[k] = _symmetrize(a.T @ selection[k] @ a)
        uncontrolled[k] = _symmetrize(a.T @ uncontrolled[k + 1] @ a + model.state_weight)
    return replace(
        ricc,
        future_error_weight=future,
        uncontrolled_cost=uncontrolled,
        selection_weight=selection,
    )


def analytic_cost_decomposition(
    model: SystemModel,
    ricc: RiccatiSolution,
    schedule,
    bank,
    init_bank=None,
) -> tuple[float, float]:
    """Closed-form expected cost of a fixed schedule, split into two parts.

    The control part ``mu0' P[0] mu0 + tr(P[0] S0) + r[0]`` is what perfect
    feedback would cost; the selection part adds the error-weighted residual
    covariance plus the per-step quantizer prices:

        selection = sum_t ( tr(N[t] C[t]) + price[schedule[t]] ),
        C[0] = S0 - F0(schedule[0]),   C[t+1] = A C[t] A' + (W - F(schedule[t+1])),

    where ``F``/``F0`` are the covariance-reduction matrices of the selected
    quantizer built against the step / initial noise respectively.  The mean
    term is zero in both shipped examples; it is included so nonzero-mean
    initial states are priced correctly.

    Args:
        model: plant description.
        ricc: control solution (selection fields not required).
        schedule: offline schedule object or plain sequence of quantizer indices.
        bank: quantizer bank built against the process-noise covariance.
        init_bank: bank built against the initial covariance; defaults to
            ``bank`` (exact only when the two covariances coincide).

    Returns:
        Tuple ``(control_part, selection_part)``; their sum is the expected
        total cost under the schedule.

    Raises:
        NumericalError: if some selected quantizer fails the covariance
            reduction requirement (residual covariance not PSD).
    """
    selections = list(getattr(schedule, "selections", schedule))
    if len(selections) != model.horizon:
        raise ConfigError(
            f"schedule length {len(selections)} does not match horizon {model.horizon}"
        )
    init_bank = bank if init_bank is None else init_bank
    a = model.state_matrix
    mean = model.init_mean

    control_part = float(mean @ ricc.cost_to_go[0] @ mean)
    control_part += float(np.trace(ricc.cost_to_go[0] @ model.init_cov)) + float(ricc.noise_offset[0])

    def residual(cov: np.ndarray, reduction: np.ndarray, which: int) -> np.ndarray:
        out = cov - reduction
        if np.linalg.eigvalsh(_symmetrize(out)).min() < -_PSD_TOL * max(1.0, float(np.trace(cov))):
            raise NumericalError(f"invalid quantizer reduction matrix for quantizer {which}")
        return out

    err_cov = residual(model.init_cov, init_bank.quantizers[selections[0]].reduction, selections[0])
    selection_part = float(np.trace(ricc.error_weight[0] @ err_cov))
    selection_part += float(model.quantizer_costs[selections[0]])
    for t in range(1, model.horizon):
        step = residual(model.noise_cov, bank.quantizers[selections[t]].reduction, selections[t])
        err_cov = a @ err_cov @ a.T + step
        selection_part += float(np.trace(ricc.error_weight[t] @ err_cov))
        selection_part += float(model.quantizer_costs[selections[t]])
    return control_part, selection_part
