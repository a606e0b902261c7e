"""Quantized-feedback LQG control with costly quantizer scheduling.

The package solves the two halves of the problem separately — the control
gains never depend on which quantizer is picked, and the quantizer
schedule never depends on the realized controls — and provides Monte
Carlo and exact-oracle machinery to evaluate the selection policies.

Modules:
    model:      system description, control recursion, selection recursions.
    quantizers: partition moments, quantizer banks, encode/decode helpers.
    estimator:  receiver-side state estimate and error-covariance updates.
    policies:   offline schedule, greedy/rollout rules, brute-force oracle.
    simulate:   closed-loop Monte Carlo engine and the trade-off sweep.
    config:     experiment config parsing/serialization.
    reports:    CSV/JSON writers and figure renderers.
    cli:        ``qflqg`` command-line entry point.
"""

from .config import ExperimentConfig, apply_overrides, dump_config, load_config
from .errors import ConfigError, NumericalError, OracleSizeError, QflqgError
from .estimator import EstimatorState, correct, initial_state, predict, propagate_error_cov
from .model import (
    RiccatiSolution,
    SystemModel,
    analytic_cost_decomposition,
    solve_control_riccati,
    solve_selection_recursions,
)
from .policies import (
    DiscreteNoise,
    MdpState,
    OfflineSchedule,
    StagePolicy,
    brute_force_mdp,
    discretized_policy_value,
    gauss_hermite_support,
    greedy_policy,
    make_greedy_policy,
    make_rollout_policy,
    offline_schedule,
    rollout_policy,
    terminal_stage_policy,
)
from .quantizers import (
    Cell,
    Quantizer,
    QuantizerBank,
    build_bank,
    build_grid_quantizer,
    build_quantizer,
    build_quantizer_on_support,
    channel_posterior_mean,
    grid_cells,
    open_loop_quantizer,
    quantize,
)
from .simulate import (
    ExperimentResult,
    ParetoPoint,
    SimTrace,
    bit_rate,
    default_beta_grid,
    monte_carlo,
    pareto_sweep,
    simulate_run,
    utilization,
)

__version__ = "0.1.0"

__all__ = [
    "Cell",
    "ConfigError",
    "DiscreteNoise",
    "EstimatorState",
    "ExperimentConfig",
    "ExperimentResult",
    "MdpState",
    "NumericalError",
    "OfflineSchedule",
    "OracleSizeError",
    "ParetoPoint",
    "QflqgError",
    "Quantizer",
    "QuantizerBank",
    "RiccatiSolution",
    "SimTrace",
    "StagePolicy",
    "SystemModel",
    "analytic_cost_decomposition",
    "apply_overrides",
    "bit_rate",
    "brute_force_mdp",
    "build_bank",
    "build_grid_quantizer",
    "build_quantizer",
    "build_quantizer_on_support",
    "channel_posterior_mean",
    "correct",
    "default_beta_grid",
    "discretized_policy_value",
    "dump_config",
    "gauss_hermite_support",
    "greedy_policy",
    "grid_cells",
    "initial_state",
    "load_config",
    "make_greedy_policy",
    "make_rollout_policy",
    "monte_carlo",
    "offline_schedule",
    "open_loop_quantizer",
    "pareto_sweep",
    "predict",
    "propagate_error_cov",
    "quantize",
    "rollout_policy",
    "simulate_run",
    "solve_control_riccati",
    "solve_selection_recursions",
    "terminal_stage_policy",
    "utilization",
]
