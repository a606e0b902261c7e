"""Quantizer-selection policies under both information patterns.

Two regimes are covered:

* Quantized-measurement: the selector knows only what the controller
  knows, so the optimal schedule is deterministic in time and computable
  offline — stage k scores each quantizer by the error-weighted residual
  covariance plus its price,

      score[k, i] = tr( Om[k] (cov_k - F_i) ) + price_i,

  where ``cov_k`` is the covariance of the noise being quantized at stage
  k (the initial covariance at k = 0, the process-noise covariance after).

* Perfect-measurement: the selector sees the realized noise, turning
  selection into a finite-horizon decision problem on the pair
  (previous error, previous noise).  The final stage has an exact
  closed form; earlier stages are handled by greedy and rollout
  approximations, plus a brute-force oracle on discretized noise that
  serves as ground truth for micro-instances.

The final-stage value admits the decomposition

    C(s) = (A d + w)' N (A d + w) + min_i psi_i(s),
    psi_i(s) = -2 (A d + w)' N what_i(w) + what_i(w)' N what_i(w) + price_i,

with s = (d, w) and ``what_i(w)`` the reproduction point quantizer i
assigns to w; the quadratic term collects the action-independent part, so
the action regions are the sign structure of the psi differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .errors import ConfigError, OracleSizeError
from .model import RiccatiSolution, SystemModel
from .quantizers import QuantizerBank, build_quantizer_on_support
from .rng import psd_sqrt, rollout_stream

_ORACLE_NODE_BUDGET = 2_000_000


@dataclass(frozen=True)
class OfflineSchedule:
    """Deterministic quantizer schedule with the stage scores that chose it.

    Attributes:
        selections: length-T tuple of bank indices.
        scores: (T, M) matrix of stage scores, or None if not recorded.
    """

    selections: tuple[int, ...]
    scores: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.selections)


@dataclass(frozen=True)
class MdpState:
    """Selector state under perfect measurement: previous error and noise."""

    error_prev: np.ndarray
    noise_prev: np.ndarray

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.error_prev, self.noise_prev])

    @classmethod
    def from_vector(cls, vec) -> "MdpState":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        half = vec.size // 2
        return cls(error_prev=vec[:half], noise_prev=vec[half:])


@dataclass(frozen=True)
class StagePolicy:
    """Deterministic map from (stage, MdpState) to a bank index.

    ``base_schedule``/``n_samples`` are populated only for the rollout
    flavor, which the simulation engine recognizes to thread per-run
    deterministic sampling streams through the decision.
    """

    flavor: str
    decide: Callable[[int, MdpState], int]
    base_schedule: OfflineSchedule | None = None
    n_samples: int = 0

    def __call__(self, k: int, state: MdpState) -> int:
        return int(self.decide(k, state))


def offline_schedule(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    init_bank: QuantizerBank | None = None,
    costs_override: np.ndarray | None = None,
) -> OfflineSchedule:
    """Optimal deterministic schedule under quantized-measurement information.

    Args:
        model: plant description (supplies the quantizer prices).
        ricc: solution with the selection weights populated.
        bank: quantizer bank built against the process-noise covariance.
        init_bank: bank built against the initial covariance, used at stage 0;
            defaults to ``bank``.
        costs_override: alternative price vector used in the *score only*
            (the trade-off sweep rescales prices without touching reported
            costs).

    Returns:
        OfflineSchedule with per-stage argmin indices (ties to the lowest
        index) and the full score matrix.
    """
    if ricc.selection_weight is None:
        raise ConfigError("selection recursions not solved; call solve_selection_recursions first")
    init_bank = bank if init_bank is None else init_bank
    costs = model.quantizer_costs if costs_override is None else np.asarray(costs_override, float)
    if len(bank) != costs.size:
        raise ConfigError(f"bank has {len(bank)} quantizers but {costs.size} prices supplied")

    step_reductions = bank.reduction_stack()
    init_reductions = init_bank.reduction_stack()
    scores = np.empty((model.horizon, len(bank)))
    for k in range(model.horizon):
        cov = model.init_cov if k == 0 else model.noise_cov
        reductions = init_reductions if k == 0 else step_reductions
        residuals = cov[None, :, :] - reductions
        scores[k] = np.einsum("ij,mji->m", ricc.selection_weight[k], residuals) + costs
    selections = tuple(int(i) for i in np.argmin(scores, axis=1))
    return OfflineSchedule(selections=selections, scores=scores)


def _reproduction_points(bank: QuantizerBank, noise: np.ndarray) -> np.ndarray:
    """Reproduction point of every quantizer in the bank for one noise vector."""
    return np.stack(
        [q.centroids[q.cell_index_batch(noise[None, :])[0]] for q in bank.quantizers]
    )


def terminal_stage_policy(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    state: MdpState,
) -> tuple[int, float]:
    """Exact final-stage selection and value under perfect measurement.

    Evaluates the structured value described in the module docstring at
    k = T - 1.  The caller supplies the bank appropriate to that stage
    (the initial-covariance bank only when the horizon is 1).

    Returns:
        (selected bank index, final-stage value at ``state``).
    """
    k = model.horizon - 1
    weight = ricc.error_weight[k]
    pred = model.state_matrix @ state.error_prev + state.noise_prev
    points = _reproduction_points(bank, state.noise_prev)
    psi = (
        -2.0 * (points @ weight @ pred)
        + np.einsum("mi,ij,mj->m", points, weight, points)
        + model.quantizer_costs
    )
    index = int(np.argmin(psi))
    value = float(pred @ weight @ pred + psi[index])
    return index, value


def greedy_policy(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    k: int,
    state: MdpState,
) -> int:
    """One-step-lookahead selection: minimize the immediate stage cost.

    Scores each quantizer by the error-weighted one-step residual plus its
    price and returns the argmin (ties to the lowest index).  At the final
    stage this coincides with :func:`terminal_stage_policy`'s argmin.
    """
    weight = ricc.error_weight[k]
    pred = model.state_matrix @ state.error_prev + state.noise_prev
    points = _reproduction_points(bank, state.noise_prev)
    residuals = pred[None, :] - points
    scores = np.einsum("mi,ij,mj->m", residuals, weight, residuals) + model.quantizer_costs
    return int(np.argmin(scores))


@dataclass(frozen=True)
class DiscreteNoise:
    """Finite noise support with probabilities (oracle discretization)."""

    points: np.ndarray
    probs: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        wts = np.asarray(self.probs, dtype=float).reshape(-1)
        if pts.shape[0] != wts.size:
            raise ConfigError("discrete noise: points/probs length mismatch")
        if abs(wts.sum() - 1.0) > 1e-9 or np.any(wts < 0):
            raise ConfigError("discrete noise: probabilities must be nonnegative and sum to 1")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "probs", wts)

    @property
    def size(self) -> int:
        return self.probs.size


def gauss_hermite_support(cov: np.ndarray, points_per_axis: int = 3) -> DiscreteNoise:
    """Tensorized Gauss-Hermite sigma points matching N(0, cov) moments.

    Per axis the standard-normal rule is exact for polynomials up to degree
    2*points_per_axis - 1, so with 3 points the discrete support reproduces
    the mean and covariance of the Gaussian exactly.
    """
    cov = np.asarray(cov, dtype=float)
    dim = cov.shape[0]
    nodes, weights = hermegauss(points_per_axis)
    weights = weights / weights.sum()
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    z = np.stack([g.ravel() for g in grids], axis=1)
    wgrids = np.meshgrid(*([weights] * dim), indexing="ij")
    probs = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return DiscreteNoise(points=z @ psd_sqrt(cov), probs=probs)


def rollout_policy(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    k: int,
    state: MdpState,
    base: OfflineSchedule,
    n_samples: int,
    seed: int = 0,
    init_bank: QuantizerBank | None = None,
    run_index: int = 0,
    discrete_noise: DiscreteNoise | None = None,
) -> int:
    """One-step lookahead with Monte Carlo tail under the base schedule.

    For each candidate quantizer the immediate stage cost is exact; the
    cost-to-go is estimated by playing the base schedule forward over
    ``n_samples`` shared noise futures (common random numbers across
    candidates), making the decision deterministic given ``seed``.

    Args:
        discrete_noise: when set, tail noise is sampled from this finite
            support instead of the Gaussian (used on oracle micro-instances).
    """
    if n_samples < 1:
        raise ConfigError(f"rollout: n_samples must be >= 1, got {n_samples}")
    horizon = model.horizon
    if not 0 <= k < horizon:
        raise ConfigError(f"rollout: stage {k} outside horizon {horizon}")
    bank_k = init_bank if (k == 0 and init_bank is not None) else bank
    weight = ricc.error_weight[k]
    a = model.state_matrix
    pred = a @ state.error_prev + state.noise_prev
    points = _reproduction_points(bank_k, state.noise_prev)

    tail_steps = horizon - 1 - k
    if tail_steps > 0:
        rng = rollout_stream(seed, run_index, k)
        if discrete_noise is None:
            z = rng.standard_normal((n_samples, tail_steps, model.state_dim))
            tail_noise = z @ psd_sqrt(model.noise_cov)
        else:
            idx = rng.choice(discrete_noise.size, size=(n_samples, tail_steps), p=discrete_noise.probs)
            tail_noise = discrete_noise.points[idx]

    totals = np.empty(len(bank_k))
    for i in range(len(bank_k)):
        delta = pred - points[i]
        stage = float(delta @ weight @ delta) + float(model.quantizer_costs[i])
        tail = 0.0
        if tail_steps > 0:
            deltas = np.broadcast_to(delta, (n_samples, delta.size)).copy()
            for t in range(k + 1, horizon):
                noise_t = tail_noise[:, t - k - 1]
                q = bank.quantizers[base.selections[t]]
                reproduced = q.centroids[q.cell_index_batch(noise_t)]
                deltas = deltas @ a.T + noise_t - reproduced
                tail += float(
                    np.mean(np.einsum("ri,ij,rj->r", deltas, ricc.error_weight[t], deltas))
                ) + float(model.quantizer_costs[base.selections[t]])
        totals[i] = stage + tail
    return int(np.argmin(totals))


def make_greedy_policy(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    init_bank: QuantizerBank | None = None,
) -> StagePolicy:
    """Package the greedy rule as a StagePolicy (stage-0 bank handled)."""
    init_bank = bank if init_bank is None else init_bank

    def decide(k: int, state: MdpState) -> int:
        return greedy_policy(model, ricc, init_bank if k == 0 else bank, k, state)

    return StagePolicy(flavor="greedy", decide=decide)


def make_rollout_policy(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    base: OfflineSchedule,
    n_samples: int,
    seed: int = 0,
    init_bank: QuantizerBank | None = None,
) -> StagePolicy:
    """Package the rollout rule as a StagePolicy.

    The attached ``decide`` uses a fixed (seed, run 0) sampling stream; the
    Monte Carlo engine instead dispatches on the flavor tag and substitutes
    per-run streams so batches stay reproducible.
    """

    def decide(k: int, state: MdpState) -> int:
        return rollout_policy(
            model, ricc, bank, k, state, base, n_samples,
            seed=seed, init_bank=init_bank,
        )

    return StagePolicy(flavor="rollout", decide=decide, base_schedule=base, n_samples=int(n_samples))


def _tree_guard(n_actions: int, support: int, horizon: int) -> None:
    nodes, layer = 0.0, float(support)
    for _ in range(horizon):
        nodes += layer
        layer *= n_actions * support
        if nodes + layer > _ORACLE_NODE_BUDGET:
            raise OracleSizeError(
                f"instance too large for oracle: ~{int(nodes + layer)} nodes "
                f"(budget {_ORACLE_NODE_BUDGET})"
            )


def brute_force_mdp(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    noise_support: DiscreteNoise | Sequence,
    horizon: int,
    init_bank: QuantizerBank | None = None,
    init_support: DiscreteNoise | None = None,
) -> tuple[float, dict]:
    """Exact selection optimum on a discretized micro-instance.

    Backward induction over the full scenario tree of (noise outcome,
    action) histories.  The noise support should be built so the bank's
    moment identities hold on it (see
    :func:`qflqg.quantizers.build_quantizer_on_support`).

    Args:
        noise_support: finite support for the per-step noise, either a
            DiscreteNoise or a sequence of (point, probability) pairs.
        horizon: must equal the model horizon (stage weights are indexed by
            absolute time); kept explicit as a guard.
        init_support: support of the initial deviation; defaults to
            ``noise_support``.

    Returns:
        (optimal expected selection cost, policy table) where the table maps
        (stage, previous-error tuple, support index) to the optimal action
        at every reachable node.

    Raises:
        OracleSizeError: if the scenario tree exceeds the node budget.
    """
    if not isinstance(noise_support, DiscreteNoise):
        pts, wts = zip(*noise_support)
        noise_support = DiscreteNoise(points=np.array(pts, ndmin=2).reshape(len(wts), -1),
                                      probs=np.array(wts))
    if horizon != model.horizon:
        raise ConfigError(
            f"oracle horizon {horizon} must match the model horizon {model.horizon} "
            "(stage weights are time-indexed)"
        )
    init_bank = bank if init_bank is None else init_bank
    init_support = noise_support if init_support is None else init_support
    _tree_guard(len(bank), max(noise_support.size, init_support.size), horizon)

    a = model.state_matrix
    costs = model.quantizer_costs
    memo: dict = {}
    policy: dict = {}

    def stage_value(t: int, delta: np.ndarray, w_idx: int) -> float:
        key = (t, delta.tobytes(), w_idx)
        if key in memo:
            return memo[key]
        support = init_support if t == 0 else noise_support
        the_bank = init_bank if t == 0 else bank
        noise = support.points[w_idx]
        pred = a @ delta + noise
        best_val, best_act = np.inf, 0
        for i, q in enumerate(the_bank.quantizers):
            reproduced = q.centroids[q.cell_index_batch(noise[None, :])[0]]
            new_delta = pred - reproduced
            value = float(new_delta @ ricc.error_weight[t] @ new_delta) + float(costs[i])
            if t + 1 < horizon:
                value += sum(
                    noise_support.probs[j] * stage_value(t + 1, new_delta, j)
                    for j in range(noise_support.size)
                )
            if value < best_val:
                best_val, best_act = value, i
        memo[key] = best_val
        policy[(t, tuple(delta), w_idx)] = best_act
        return best_val

    zero = np.zeros(model.state_dim)
    total = sum(
        init_support.probs[j] * stage_value(0, zero, j) for j in range(init_support.size)
    )
    return float(total), policy


def discretized_policy_value(
    model: SystemModel,
    ricc: RiccatiSolution,
    bank: QuantizerBank,
    noise_support: DiscreteNoise,
    decide: Callable[[int, MdpState], int],
    init_bank: QuantizerBank | None = None,
    init_support: DiscreteNoise | None = None,
) -> float:
    """Exact expected cost of an arbitrary policy on a discretized instance.

    Enumerates the same scenario tree as :func:`brute_force_mdp` but with
    actions dictated by ``decide(stage, state)``; used to compare
    approximate policies against the oracle without sampling error.
    """
    init_bank = bank if init_bank is None else init_bank
    init_support = noise_support if init_support is None else init_support
    _tree_guard(1, max(noise_support.size, init_support.size), model.horizon)
    a = model.state_matrix
    memo: dict = {}

    def walk(t: int, delta: np.ndarray, w_idx: int) -> float:
        key = (t, delta.tobytes(), w_idx)
        if key in memo:
            return memo[key]
        support = init_support if t == 0 else noise_support
        the_bank = init_bank if t == 0 else bank
        noise = support.points[w_idx]
        action = int(decide(t, MdpState(error_prev=delta, noise_prev=noise)))
        q = the_bank.quantizers[action]
        reproduced = q.centroids[q.cell_index_batch(noise[None, :])[0]]
        new_delta = a @ delta + noise - reproduced
        value = float(new_delta @ ricc.error_weight[t] @ new_delta)
        value += float(model.quantizer_costs[action])
        if t + 1 < model.horizon:
            value += sum(
                noise_support.probs[j] * walk(t + 1, new_delta, j)
                for j in range(noise_support.size)
            )
        memo[key] = value
        return value

    zero = np.zeros(model.state_dim)
    return float(
        sum(init_support.probs[j] * walk(0, zero, j) for j in range(init_support.size))
    )
