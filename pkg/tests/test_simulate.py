"""Closed-loop engine tests: cost audits, degenerate exact cases, moment
agreement with the covariance recursion, determinism, and the sweep."""

import numpy as np
import pytest

from qflqg import (
    ConfigError,
    NumericalError,
    SystemModel,
    analytic_cost_decomposition,
    bit_rate,
    build_bank,
    make_greedy_policy,
    monte_carlo,
    offline_schedule,
    open_loop_quantizer,
    pareto_sweep,
    propagate_error_cov,
    simulate_run,
    solve_control_riccati,
    solve_selection_recursions,
    utilization,
)
from qflqg.quantizers import QuantizerBank
from qflqg.simulate import resolve_threads

BREAKS3 = [[[0.0], []], [[0.0], [0.0]], [[-0.5, 0.0, 0.5], [0.0]]]


def plant_2d(horizon=12, costs=(0.03, 0.06, 0.09), a=None, noise=0.25, init=1.0):
    a = [[0.9, 0.2], [0.0, 0.7]] if a is None else a
    return SystemModel(
        state_matrix=a,
        input_matrix=[[0.1, 0.0], [0.0, 0.15]],
        noise_cov=(noise * np.eye(2)).tolist(),
        init_mean=[0.0, 0.0],
        init_cov=(init * np.eye(2)).tolist(),
        state_weight=(0.5 * np.eye(2)).tolist(),
        terminal_weight=(0.5 * np.eye(2)).tolist(),
        input_weight=(0.5 * np.eye(2)).tolist(),
        horizon=horizon,
        quantizer_costs=costs,
    )


def banks_2d(model, costs=(0.03, 0.06, 0.09)):
    return (
        build_bank(BREAKS3, list(costs), model.noise_cov),
        build_bank(BREAKS3, list(costs), model.init_cov),
    )


def solved(model):
    return solve_selection_recursions(model, solve_control_riccati(model))


class TestTraceAudit:
    def setup_method(self):
        self.model = plant_2d()
        self.ricc = solved(self.model)
        self.bank, self.init_bank = banks_2d(self.model)
        self.sched = offline_schedule(self.model, self.ricc, self.bank, init_bank=self.init_bank)
        self.trace = simulate_run(
            self.model, self.ricc, self.bank, self.sched, seed=42, init_bank=self.init_bank
        )

    def test_total_is_sum_of_parts(self):
        assert self.trace.total_cost == pytest.approx(
            self.trace.control_costs.sum() + self.trace.quant_costs.sum(), rel=1e-12
        )

    def test_stage_costs_recompute_from_states(self):
        q1 = self.model.state_weight
        r = self.model.input_weight
        for t in range(self.model.horizon):
            x, u = self.trace.states[t], self.trace.inputs[t]
            assert self.trace.control_costs[t] == pytest.approx(
                x @ q1 @ x + u @ r @ u, rel=1e-12, abs=1e-14
            )
        x_term = self.trace.states[-1]
        assert self.trace.control_costs[-1] == pytest.approx(
            x_term @ self.model.terminal_weight @ x_term, rel=1e-12
        )

    def test_quant_costs_follow_schedule(self):
        np.testing.assert_array_equal(
            self.trace.quant_costs,
            np.asarray(self.model.quantizer_costs)[list(self.sched.selections)],
        )

    def test_inputs_are_certainty_equivalent(self):
        for t in range(self.model.horizon):
            np.testing.assert_allclose(
                self.trace.inputs[t],
                -self.ricc.gain[t] @ self.trace.x_filtered[t],
                atol=1e-13,
            )

    def test_error_is_state_minus_filtered(self):
        """The maintained error equals the plant state minus the filtered
        estimate, at every stage (shifted: errors[t] pairs with the stage-t
        estimate, i.e. states[t] after the stage's reproduction arrived)."""
        for t in range(self.model.horizon):
            np.testing.assert_allclose(
                self.trace.errors[t],
                self.trace.states[t] - self.trace.x_filtered[t],
                atol=1e-12,
            )

    def test_plant_recursion_reconstructs(self):
        a = self.model.state_matrix
        b = self.model.input_matrix
        for t in range(self.model.horizon):
            drive = self.trace.states[t + 1] - (
                a @ self.trace.states[t] + b @ self.trace.inputs[t]
            )
            # the residual is exactly the drawn process noise; bounded sanity
            assert np.all(np.abs(drive) < 6.0)


def test_noise_free_run_is_exact_lqr():
    """Zero noise and zero initial spread: the loop follows the closed-form
    gain recursion and costs exactly mu' P_0 mu."""
    model = SystemModel(
        state_matrix=[[0.9, 0.2], [0.0, 0.7]],
        input_matrix=[[0.1, 0.0], [0.0, 0.15]],
        noise_cov=np.zeros((2, 2)).tolist(),
        init_mean=[2.0, -1.0],
        init_cov=np.zeros((2, 2)).tolist(),
        state_weight=(0.5 * np.eye(2)).tolist(),
        terminal_weight=(0.5 * np.eye(2)).tolist(),
        input_weight=(0.5 * np.eye(2)).tolist(),
        horizon=15,
        quantizer_costs=[0.0],
    )
    ricc = solved(model)
    bank = QuantizerBank(quantizers=(open_loop_quantizer(2),), noise_cov=model.noise_cov)
    sched = offline_schedule(model, ricc, bank)
    trace = simulate_run(model, ricc, bank, sched, seed=0)

    x = np.array([2.0, -1.0])
    for t in range(model.horizon):
        np.testing.assert_allclose(trace.states[t], x, atol=1e-12)
        x = (model.state_matrix - model.input_matrix @ ricc.gain[t]) @ x
    mu = np.array([2.0, -1.0])
    assert trace.total_cost == pytest.approx(mu @ ricc.cost_to_go[0] @ mu, rel=1e-12)
    np.testing.assert_allclose(trace.errors, 0.0, atol=1e-15)


def test_fine_quantizer_approaches_perfect_feedback():
    """A very fine scalar quantizer makes the loop nearly classical LQG:
    the analytic total shrinks to the perfect-feedback cost, and the Monte
    Carlo mean agrees with the analytic total within sampling error."""
    fine_breaks = [np.arange(-2.0, 2.0001, 0.05).tolist()]
    model = SystemModel(
        state_matrix=[[0.9]],
        input_matrix=[[1.0]],
        noise_cov=[[0.25]],
        init_mean=[0.0],
        init_cov=[[0.25]],
        state_weight=[[0.5]],
        terminal_weight=[[0.5]],
        input_weight=[[0.5]],
        horizon=30,
        quantizer_costs=[0.0],
    )
    ricc = solved(model)
    bank = build_bank([fine_breaks], [0.0], model.noise_cov)
    sched = offline_schedule(model, ricc, bank)
    control, selection = analytic_cost_decomposition(model, ricc, sched, bank)
    perfect = float(np.trace(ricc.cost_to_go[0] * 0.25)) + ricc.noise_offset[0]
    assert control == pytest.approx(perfect, rel=1e-12)
    assert selection < 0.01 * perfect

    result = monte_carlo(model, ricc, bank, sched, n_runs=1500, seed=3)
    assert abs(result.mean_cost - (control + selection)) < 4.0 * result.stderr


def test_monte_carlo_mean_matches_analytic_decomposition():
    model = plant_2d(horizon=12)
    ricc = solved(model)
    bank, init_bank = banks_2d(model)
    sched = offline_schedule(model, ricc, bank, init_bank=init_bank)
    control, selection = analytic_cost_decomposition(
        model, ricc, sched, bank, init_bank=init_bank
    )
    result = monte_carlo(model, ricc, bank, sched, n_runs=4000, seed=17, init_bank=init_bank)
    assert abs(result.mean_cost - (control + selection)) < 3.0 * result.stderr
    # the quantization spend is deterministic under an offline schedule
    assert result.mean_quant_cost == pytest.approx(
        sum(model.quantizer_costs[i] for i in sched.selections), rel=1e-14
    )


def test_error_moments_match_covariance_recursion():
    """Empirical moments of the maintained error match the covariance
    propagation built from the selected reduction matrices."""
    model = plant_2d(horizon=8)
    ricc = solved(model)
    bank, init_bank = banks_2d(model)
    sched = offline_schedule(model, ricc, bank, init_bank=init_bank)
    result = monte_carlo(
        model, ricc, bank, sched, n_runs=4000, seed=23, init_bank=init_bank, traces_runs=4000
    )
    errors = np.stack([tr.errors for tr in result.traces])  # (runs, T, 2)

    expected = np.asarray(model.init_cov) - init_bank.quantizers[sched.selections[0]].reduction
    for t in range(model.horizon):
        if t > 0:
            expected = propagate_error_cov(
                expected, model, bank.quantizers[sched.selections[t]].reduction
            )
        emp = np.cov(errors[:, t, :].T, ddof=1)
        np.testing.assert_allclose(errors[:, t, :].mean(axis=0), 0.0, atol=0.05)
        np.testing.assert_allclose(emp, expected, atol=6.0 * np.abs(expected).max() / np.sqrt(2000))


def test_gain_scaling_leaves_error_and_selection_untouched():
    """Halving every control gain changes states and inputs but leaves the
    error sequence and the adaptive selections bitwise identical."""
    model = plant_2d(horizon=20)
    ricc = solved(model)
    bank, init_bank = banks_2d(model)
    policy = make_greedy_policy(model, ricc, bank, init_bank=init_bank)
    kw = dict(policy=policy, seed=97, init_bank=init_bank)
    full = simulate_run(model, ricc, bank, kw["policy"], 97, init_bank=init_bank, gains=ricc.gain)
    half = simulate_run(
        model, ricc, bank, kw["policy"], 97, init_bank=init_bank, gains=0.5 * ricc.gain
    )
    np.testing.assert_array_equal(full.errors, half.errors)
    np.testing.assert_array_equal(full.selections, half.selections)
    np.testing.assert_array_equal(full.centroids, half.centroids)
    assert not np.array_equal(full.states, half.states)
    assert not np.array_equal(full.inputs, half.inputs)


class TestDeterminism:
    def setup_method(self):
        self.model = plant_2d(horizon=10)
        self.ricc = solved(self.model)
        self.bank, self.init_bank = banks_2d(self.model)
        self.policy = make_greedy_policy(self.model, self.ricc, self.bank, init_bank=self.init_bank)

    def run(self, threads, n_runs=2050):
        return monte_carlo(
            self.model, self.ricc, self.bank, self.policy, n_runs, seed=11,
            init_bank=self.init_bank, threads=threads,
        )

    def test_thread_count_invariance(self):
        serial = self.run(threads=1)
        pooled = self.run(threads=8)
        np.testing.assert_array_equal(serial.costs, pooled.costs)
        np.testing.assert_array_equal(serial.utilization, pooled.utilization)
        assert serial.mean_cost == pooled.mean_cost
        assert serial.bit_rate == pooled.bit_rate

    def test_single_run_reproduces_batch_slice(self):
        batch = self.run(threads=1, n_runs=5)
        tr = simulate_run(
            self.model, self.ricc, self.bank, self.policy, seed=11,
            init_bank=self.init_bank, run_index=3,
        )
        assert tr.total_cost == batch.costs[3]

    def test_different_seeds_differ(self):
        a = monte_carlo(
            self.model, self.ricc, self.bank, self.policy, 50, seed=1, init_bank=self.init_bank
        )
        b = monte_carlo(
            self.model, self.ricc, self.bank, self.policy, 50, seed=2, init_bank=self.init_bank
        )
        assert not np.array_equal(a.costs, b.costs)


def test_offline_utilization_comes_from_schedule():
    model = plant_2d(horizon=10)
    ricc = solved(model)
    bank, init_bank = banks_2d(model)
    sched = offline_schedule(model, ricc, bank, init_bank=init_bank)
    result = monte_carlo(model, ricc, bank, sched, n_runs=7, seed=0, init_bank=init_bank)
    np.testing.assert_array_equal(
        result.utilization, utilization(np.asarray(sched.selections), len(bank))
    )


def test_utilization_running_fractions():
    rho = utilization(np.array([0, 1, 1, 2]), 3)
    expected = np.array(
        [[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [1 / 3, 2 / 3, 0.0], [0.25, 0.5, 0.25]]
    )
    np.testing.assert_allclose(rho, expected, atol=1e-15)
    np.testing.assert_allclose(rho.sum(axis=1), 1.0, atol=1e-15)


def test_bit_rate_hand_value():
    assert bit_rate(np.array([0, 1, 2, 2]), np.array([2, 4, 8])) == pytest.approx(2.25)


def test_resolve_threads_env(monkeypatch):
    monkeypatch.delenv("QFLQG_THREADS", raising=False)
    assert resolve_threads(None) == 1
    assert resolve_threads(4) == 4
    monkeypatch.setenv("QFLQG_THREADS", "6")
    assert resolve_threads(None) == 6
    monkeypatch.setenv("QFLQG_THREADS", "zero")
    with pytest.raises(ConfigError, match="QFLQG_THREADS"):
        resolve_threads(None)


def test_unstable_open_loop_overflows():
    """A wildly unstable uncontrolled plant must fail loudly, not silently
    saturate."""
    model = SystemModel(
        state_matrix=[[1e7]],
        input_matrix=[[1.0]],
        noise_cov=[[1.0]],
        init_mean=[0.0],
        init_cov=[[1.0]],
        state_weight=[[0.5]],
        terminal_weight=[[0.5]],
        input_weight=[[0.5]],
        horizon=50,
        quantizer_costs=[0.0],
    )
    with np.errstate(over="ignore", invalid="ignore"):
        ricc = solved(model)
        bank = QuantizerBank(quantizers=(open_loop_quantizer(1),), noise_cov=model.noise_cov)
        sched = offline_schedule(model, ricc, bank)
        with pytest.raises(NumericalError, match="overflow"):
            monte_carlo(model, ricc, bank, sched, n_runs=2, seed=0)


class TestParetoSweep:
    def setup_method(self):
        self.model = plant_2d(horizon=10, costs=(0.03, 0.06, 0.09))
        self.bank, self.init_bank = banks_2d(self.model)

    def test_quant_cost_exact_and_monotone(self):
        points = pareto_sweep(
            self.model, self.bank, [0.02, 0.3, 1.0], n_runs=300, seed=5,
            init_bank=self.init_bank,
        )
        assert len(points) == 3
        for p in points:
            assert p.quant_cost == pytest.approx(
                sum(self.model.quantizer_costs[i] for i in p.selections), rel=1e-14
            )
        # heavier price weighting (small beta) never spends more on quantizers
        assert points[0].quant_cost <= points[1].quant_cost <= points[2].quant_cost

    def test_dominance_flags_match_quadratic_scan(self):
        points = pareto_sweep(
            self.model, self.bank, np.linspace(0.05, 1.0, 8), n_runs=200, seed=9,
            init_bank=self.init_bank,
        )
        for i, p in enumerate(points):
            expected = any(
                q.control_cost <= p.control_cost
                and q.quant_cost <= p.quant_cost
                and (q.control_cost < p.control_cost or q.quant_cost < p.quant_cost)
                for j, q in enumerate(points)
                if j != i
            )
            assert p.dominated == expected

    def test_shared_noise_across_betas(self):
        """Two betas mapping to the same schedule must report the identical
        Monte Carlo value (cached, not re-sampled)."""
        points = pareto_sweep(
            self.model, self.bank, [1.0, 0.999], n_runs=150, seed=5,
            init_bank=self.init_bank,
        )
        if points[0].selections == points[1].selections:
            assert points[0].control_cost == points[1].control_cost

    def test_rejects_bad_betas(self):
        with pytest.raises(ConfigError, match="betas"):
            pareto_sweep(self.model, self.bank, [0.0, 0.5], 10, 0, init_bank=self.init_bank)
        with pytest.raises(ConfigError, match="betas"):
            pareto_sweep(self.model, self.bank, [1.5], 10, 0, init_bank=self.init_bank)
        with pytest.raises(ConfigError, match="empty"):
            pareto_sweep(self.model, self.bank, [], 10, 0, init_bank=self.init_bank)


def test_n_runs_one_has_zero_stderr():
    model = plant_2d(horizon=5)
    ricc = solved(model)
    bank, init_bank = banks_2d(model)
    sched = offline_schedule(model, ricc, bank, init_bank=init_bank)
    result = monte_carlo(model, ricc, bank, sched, n_runs=1, seed=0, init_bank=init_bank)
    assert result.stderr == 0.0
    assert result.n_runs == 1
