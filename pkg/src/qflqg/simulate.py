"""Closed-loop Monte Carlo engine and experiment sweeps.

One simulation step at time t, given the previous estimate pair and the
noise tensor, proceeds exactly in this order:

    1. the noise that entered the state at time t is revealed to the
       encoder (at t = 0 this is the initial deviation);
    2. the active policy selects a quantizer;
    3. the encoder transmits the cell's reproduction point;
    4. the estimator corrects: filtered = predicted + point;
    5. the controller applies u = -gain[t] @ filtered;
    6. plant and estimator advance one step.

The engine is vectorized over runs.  Noise for run r comes exclusively
from the counter-based stream keyed (seed, r), and batches are processed
in fixed-size chunks whose boundaries do not depend on the worker count,
so results are bitwise reproducible for any thread setting.  The
estimation error is propagated by its own recursion (previous error
through the dynamics, plus noise, minus reproduction point) and never
recomputed from states — this keeps it bitwise identical across control
gains, which is the separation structure the tests pin down.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .model import RiccatiSolution, SystemModel, solve_control_riccati, solve_selection_recursions
from .policies import MdpState, OfflineSchedule, StagePolicy, offline_schedule, rollout_policy
from .quantizers import QuantizerBank
from .rng import draw_noise_tensor

_CHUNK = 1024


@dataclass(eq=False)
class SimTrace:
    """Complete record of one closed-loop run."""

    states: np.ndarray          # (T+1, n)
    inputs: np.ndarray          # (T, m)
    selections: np.ndarray      # (T,) bank indices
    centroids: np.ndarray       # (T, n) delivered reproduction points
    x_filtered: np.ndarray      # (T, n)
    x_predicted: np.ndarray     # (T+1, n)
    errors: np.ndarray          # (T, n) estimation errors
    control_costs: np.ndarray   # (T+1,) quadratic stage costs, terminal last
    quant_costs: np.ndarray     # (T,) per-step quantizer prices
    total_cost: float


@dataclass(eq=False)
class ExperimentResult:
    """Aggregate of a Monte Carlo batch.

    ``utilization[t, i]`` is the average fraction of steps up to and
    including t at which quantizer i was active; rows sum to one.
    """

    mean_cost: float
    stderr: float
    mean_control_cost: float
    mean_quant_cost: float
    utilization: np.ndarray
    bit_rate: float
    n_runs: int
    seed: int
    costs: np.ndarray
    control_cost_runs: np.ndarray
    quant_cost_runs: np.ndarray
    traces: list[SimTrace]


def resolve_threads(threads: int | None) -> int:
    """Worker count: explicit argument, else QFLQG_THREADS, else 1."""
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("QFLQG_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"QFLQG_THREADS: not an integer: {env!r}") from exc
    return 1


def _select_batch(policy, t, err_prev, noise_prev, bank_t, model, ricc, bank, seed, run_offset):
    """Quantizer index per run for one stage; vectorized where the policy allows."""
    n_runs = noise_prev.shape[0]
    if isinstance(policy, OfflineSchedule):
        return np.full(n_runs, policy.selections[t], dtype=int)
    pred = err_prev @ model.state_matrix.T + noise_prev
    if isinstance(policy, StagePolicy) and policy.flavor == "greedy":
        weight = ricc.error_weight[t]
        scores = np.empty((n_runs, len(bank_t)))
        for i, q in enumerate(bank_t.quantizers):
            reproduced = q.centroids[q.cell_index_batch(noise_prev)]
            resid = pred - reproduced
            scores[:, i] = np.einsum("ri,ij,rj->r", resid, weight, resid) + model.quantizer_costs[i]
        return np.argmin(scores, axis=1)
    if isinstance(policy, StagePolicy) and policy.flavor == "rollout":
        base = policy.base_schedule
        out = np.empty(n_runs, dtype=int)
        for r in range(n_runs):
            out[r] = rollout_policy(
                model, ricc, bank, t,
                MdpState(error_prev=err_prev[r], noise_prev=noise_prev[r]),
                base, policy.n_samples, seed=seed,
                init_bank=bank_t if t == 0 else None,
                run_index=run_offset + r,
            )
        return out
    if isinstance(policy, StagePolicy):
        return np.array(
            [policy(t, MdpState(error_prev=err_prev[r], noise_prev=noise_prev[r]))
             for r in range(n_runs)],
            dtype=int,
        )
    raise ConfigError(f"unsupported policy object {type(policy).__name__}")


def _simulate_batch(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    policy,
    noise: np.ndarray,
    init_bank: QuantizerBank | None,
    seed: int,
    run_offset: int,
    gains: np.ndarray | None = None,
    collect: bool = False,
):
    """Run a contiguous block of simulations off a pre-drawn noise tensor."""
    init_bank = bank if init_bank is None else init_bank
    gains = ricc.gain if gains is None else gains
    n_runs = noise.shape[0]
    horizon, n, m = model.horizon, model.state_dim, model.input_dim
    a, b = model.state_matrix, model.input_matrix

    states = noise[:, 0] + model.init_mean          # x[0]
    predicted = np.broadcast_to(model.init_mean, (n_runs, n)).copy()
    err_prev = np.zeros((n_runs, n))
    control_cost = np.zeros(n_runs)
    quant_cost = np.zeros(n_runs)
    selections = np.empty((n_runs, horizon), dtype=int)

    if collect:
        rec_states = np.empty((n_runs, horizon + 1, n))
        rec_inputs = np.empty((n_runs, horizon, m))
        rec_pred = np.empty((n_runs, horizon + 1, n))
        rec_filt = np.empty((n_runs, horizon, n))
        rec_err = np.empty((n_runs, horizon, n))
        rec_cent = np.empty((n_runs, horizon, n))
        rec_ccost = np.empty((n_runs, horizon + 1))
        rec_qcost = np.empty((n_runs, horizon))

    for t in range(horizon):
        bank_t = init_bank if t == 0 else bank
        noise_prev = noise[:, t]
        chosen = _select_batch(
            policy, t, err_prev, noise_prev, bank_t, model, ricc, bank, seed, run_offset
        )
        selections[:, t] = chosen

        reproduced = np.empty((n_runs, n))
        for i in np.unique(chosen):
            rows = chosen == i
            q = bank_t.quantizers[i]
            reproduced[rows] = q.centroids[q.cell_index_batch(noise_prev[rows])]

        # error recursion: control-independent by construction
        err_prev = err_prev @ a.T + noise_prev - reproduced

        filtered = predicted + reproduced
        inputs = -(filtered @ gains[t].T)
        control_cost += np.einsum("ri,ij,rj->r", states, model.state_weight, states)
        control_cost += np.einsum("ri,ij,rj->r", inputs, model.input_weight, inputs)
        step_quant = model.quantizer_costs[chosen]
        quant_cost += step_quant

        if collect:
            rec_states[:, t] = states
            rec_inputs[:, t] = inputs
            rec_pred[:, t] = predicted
            rec_filt[:, t] = filtered
            rec_err[:, t] = err_prev
            rec_cent[:, t] = reproduced
            rec_ccost[:, t] = (
                np.einsum("ri,ij,rj->r", states, model.state_weight, states)
                + np.einsum("ri,ij,rj->r", inputs, model.input_weight, inputs)
            )
            rec_qcost[:, t] = step_quant

        states = states @ a.T + inputs @ b.T + noise[:, t + 1]
        predicted = filtered @ a.T + inputs @ b.T
        if not np.all(np.isfinite(states)):
            raise NumericalError(f"numerical overflow in closed loop at step t={t + 1}")

    terminal = np.einsum("ri,ij,rj->r", states, model.terminal_weight, states)
    control_cost += terminal
    totals = control_cost + quant_cost

    traces = []
    if collect:
        rec_states[:, horizon] = states
        rec_pred[:, horizon] = predicted
        rec_ccost[:, horizon] = terminal
        for r in range(n_runs):
            traces.append(
                SimTrace(
                    states=rec_states[r],
                    inputs=rec_inputs[r],
                    selections=selections[r].copy(),
                    centroids=rec_cent[r],
                    x_filtered=rec_filt[r],
                    x_predicted=rec_pred[r],
                    errors=rec_err[r],
                    control_costs=rec_ccost[r],
                    quant_costs=rec_qcost[r],
                    total_cost=float(totals[r]),
                )
            )
    return totals, control_cost, quant_cost, selections, traces


def simulate_run(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    policy,
    seed: int,
    init_bank: QuantizerBank | None = None,
    run_index: int = 0,
    gains: np.ndarray | None = None,
) -> SimTrace:
    """Simulate a single closed-loop run and return its full trace.

    The run reproduces slice ``run_index`` of any Monte Carlo batch with the
    same seed, bit for bit.
    """
    noise = draw_noise_tensor(
        seed, 1, model.horizon, model.noise_cov, model.init_cov, run_offset=run_index
    )
    *_, traces = _simulate_batch(
        model, ricc, bank, policy, noise, init_bank, seed, run_index, gains=gains, collect=True
    )
    return traces[0]


def utilization(selections: np.ndarray, n_quantizers: int) -> np.ndarray:
    """Running usage fractions rho[t, i] = (uses of i among steps 0..t) / (t+1).

    Accepts a single schedule (shape (T,)) or a batch (runs, T); batches are
    averaged run-wise.  Rows sum to one either way.
    """
    sel = np.asarray(selections, dtype=int)
    if sel.ndim == 1:
        horizon = sel.shape[0]
        onehot = np.zeros((horizon, n_quantizers))
        onehot[np.arange(horizon), sel] = 1.0
        counts = np.cumsum(onehot, axis=0)
        return counts / np.arange(1, horizon + 1)[:, None]
    per_run = np.stack([utilization(row, n_quantizers) for row in sel])
    return per_run.mean(axis=0)


def bit_rate(selections: np.ndarray, levels: np.ndarray) -> float:
    """Average bits per step: mean over steps (and runs) of log2(levels used)."""
    sel = np.asarray(selections, dtype=int)
    return float(np.mean(np.log2(np.asarray(levels, dtype=float)[sel])))


def monte_carlo(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    policy,
    n_runs: int,
    seed: int,
    init_bank: QuantizerBank | None = None,
    threads: int | None = None,
    traces_runs: int = 0,
    gains: np.ndarray | None = None,
) -> ExperimentResult:
    """Monte Carlo batch under a selection policy.

    Args:
        policy: OfflineSchedule or StagePolicy (greedy / rollout / custom).
        n_runs: number of independent runs (>= 1).
        seed: master seed; run r uses the (seed, r) noise stream.
        threads: worker cap; defaults to the QFLQG_THREADS environment
            variable, else single-threaded.  Results are identical for any
            value.
        traces_runs: keep full traces for the first k runs.

    Returns:
        ExperimentResult; the utilization matrix comes straight from the
        schedule when the policy is offline (all runs share it), otherwise
        it is the run average.
    """
    if n_runs < 1:
        raise ConfigError(f"run.n_runs: must be >= 1, got {n_runs}")
    workers = resolve_threads(threads)

    totals = np.empty(n_runs)
    controls = np.empty(n_runs)
    quants = np.empty(n_runs)
    selections = np.empty((n_runs, model.horizon), dtype=int)

    chunks = [(lo, min(lo + _CHUNK, n_runs)) for lo in range(0, n_runs, _CHUNK)]

    def work(span):
        lo, hi = span
        noise = draw_noise_tensor(
            seed, hi - lo, model.horizon, model.noise_cov, model.init_cov, run_offset=lo
        )
        return span, _simulate_batch(
            model, ricc, bank, policy, noise, init_bank, seed, lo, gains=gains
        )

    if workers == 1 or len(chunks) == 1:
        results = map(work, chunks)
        for (lo, hi), (tot, ctrl, qc, sel, _) in results:
            totals[lo:hi], controls[lo:hi], quants[lo:hi] = tot, ctrl, qc
            selections[lo:hi] = sel
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (lo, hi), (tot, ctrl, qc, sel, _) in pool.map(work, chunks):
                totals[lo:hi], controls[lo:hi], quants[lo:hi] = tot, ctrl, qc
                selections[lo:hi] = sel

    traces: list[SimTrace] = []
    if traces_runs > 0:
        keep = min(traces_runs, n_runs)
        noise = draw_noise_tensor(
            seed, keep, model.horizon, model.noise_cov, model.init_cov, run_offset=0
        )
        *_, traces = _simulate_batch(
            model, ricc, bank, policy, noise, init_bank, seed, 0, gains=gains, collect=True
        )

    levels = np.array([q.levels for q in bank.quantizers])
    if isinstance(policy, OfflineSchedule):
        schedule = np.asarray(policy.selections, dtype=int)
        rho = utilization(schedule, len(bank))
        rate = bit_rate(schedule, levels)
    else:
        rho = utilization(selections, len(bank))
        rate = bit_rate(selections, levels)

    stderr = float(np.std(totals, ddof=1) / np.sqrt(n_runs)) if n_runs > 1 else 0.0
    return ExperimentResult(
        mean_cost=float(np.mean(totals)),
        stderr=stderr,
        mean_control_cost=float(np.mean(controls)),
        mean_quant_cost=float(np.mean(quants)),
        utilization=rho,
        bit_rate=rate,
        n_runs=n_runs,
        seed=seed,
        costs=totals,
        control_cost_runs=controls,
        quant_cost_runs=quants,
        traces=traces,
    )


@dataclass(frozen=True)
class ParetoPoint:
    """One trade-off point of the price-weight sweep."""

    beta: float
    control_cost: float
    quant_cost: float
    control_stderr: float
    selections: tuple[int, ...]
    dominated: bool


def default_beta_grid() -> np.ndarray:
    """25 log-spaced trade-off weights from 0.01 to 1."""
    return np.logspace(-2.0, 0.0, 25)


def pareto_sweep(
    model: SystemModel,
    bank: QuantizerBank,
    betas,
    n_runs: int,
    seed: int,
    init_bank: QuantizerBank | None = None,
    threads: int | None = None,
) -> list[ParetoPoint]:
    """Trade-off sweep between control cost and quantization spend.

    For each weight beta in (0, 1] the offline schedule is recomputed with
    prices scaled by (1 - beta) / beta — the scaling enters the selection
    score only — and evaluated by Monte Carlo on noise shared across the
    whole sweep (common random numbers).  Reported components are always in
    original units: the quantization spend is exact given the schedule, the
    control cost is the Monte Carlo mean.

    Returns:
        One ParetoPoint per beta, with dominated points flagged
        (some other point is no worse in both components and better in one).
    """
    betas = np.asarray(list(betas), dtype=float)
    if betas.size == 0:
        raise ConfigError("pareto: beta grid is empty")
    if np.any(betas <= 0.0) or np.any(betas > 1.0):
        raise ConfigError("pareto: betas must lie in (0, 1]")
    ricc = solve_selection_recursions(model, solve_control_riccati(model))

    by_schedule: dict[tuple[int, ...], tuple[float, float]] = {}
    rows = []
    for beta in betas:
        scaled = model.quantizer_costs * ((1.0 - beta) / beta)
        schedule = offline_schedule(model, ricc, bank, init_bank=init_bank, costs_override=scaled)
        key = schedule.selections
        if key not in by_schedule:
            result = monte_carlo(
                model, ricc, bank, schedule, n_runs, seed,
                init_bank=init_bank, threads=threads,
            )
            by_schedule[key] = (result.mean_control_cost,
                                float(np.std(result.control_cost_runs, ddof=1) / np.sqrt(n_runs))
                                if n_runs > 1 else 0.0)
        control, control_se = by_schedule[key]
        quant = float(np.sum(model.quantizer_costs[list(key)]))
        rows.append((float(beta), control, quant, control_se, key))

    points = []
    for i, (beta, control, quant, c_se, key) in enumerate(rows):
        dominated = any(
            (oc <= control and oq <= quant and (oc < control or oq < quant))
            for j, (_, oc, oq, _, _) in enumerate(rows)
            if j != i
        )
        points.append(
            ParetoPoint(
                beta=beta, control_cost=control, quant_cost=quant,
                control_stderr=c_se, selections=key, dominated=dominated,
            )
        )
    return points
