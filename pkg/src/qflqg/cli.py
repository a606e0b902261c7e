"""Command-line driver for the quantized-feedback control experiments.

Four subcommands share one config format (see :mod:`qflqg.config`):

* ``solve``     recursion tables and the offline selection schedule
* ``simulate``  Monte Carlo closed-loop run under the configured policy
* ``pareto``    cost/price trade-off sweep over the configured beta grid
* ``oracle``    exact optimum on a discretized micro-instance, with the
                approximate policies scored on the same instance

Every run writes ``resolved.cfg`` (the canonical form of the effective
config) next to its outputs, so a result directory can be reproduced by
pointing the same subcommand back at it.  Exit codes: 0 success, 1 config
error, 2 numerical error, 3 oracle-size error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import POLICY_FLAVORS, ExperimentConfig, apply_overrides, dump_config, load_config
from .errors import ConfigError, NumericalError, OracleSizeError
from .model import solve_control_riccati, solve_selection_recursions
from .policies import (
    brute_force_mdp,
    discretized_policy_value,
    gauss_hermite_support,
    greedy_policy,
    make_greedy_policy,
    make_rollout_policy,
    offline_schedule,
    rollout_policy,
)
from .quantizers import QuantizerBank, build_quantizer_on_support, grid_cells
from .reports import (
    render_pareto_plot,
    render_schedule_plot,
    render_utilization_plot,
    write_oracle_json,
    write_pareto_csv,
    write_riccati_csv,
    write_schedule_csv,
    write_summary_json,
    write_traces_csv,
    write_utilization_csv,
)
from .simulate import default_beta_grid, monte_carlo, pareto_sweep


def _solved(cfg: ExperimentConfig):
    ricc = solve_control_riccati(cfg.model)
    return solve_selection_recursions(cfg.model, ricc)


def _meta(cfg: ExperimentConfig) -> dict:
    return {"seed": cfg.seed, "config_sha256": cfg.config_hash()}


def cmd_solve(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write riccati.csv, schedule.csv and (optionally) the schedule figure."""
    ricc = _solved(cfg)
    bank, init_bank = cfg.build_banks()
    schedule = offline_schedule(cfg.model, ricc, bank, init_bank=init_bank)
    meta = _meta(cfg)
    written = []
    path = out_dir / "riccati.csv"
    write_riccati_csv(path, ricc, meta)
    written.append(path)
    path = out_dir / "schedule.csv"
    write_schedule_csv(path, schedule, meta)
    written.append(path)
    if cfg.plot:
        path = out_dir / "schedule.png"
        render_schedule_plot(path, schedule)
        written.append(path)
    return written


def cmd_simulate(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write summary.json, utilization.csv, optional traces.csv and figure."""
    if cfg.policy_flavor == "oracle":
        raise ConfigError(
            "policy.flavor: 'oracle' runs only under the oracle command "
            "(closed-loop simulation supports offline, greedy, rollout)"
        )
    ricc = _solved(cfg)
    bank, init_bank = cfg.build_banks()
    schedule = offline_schedule(cfg.model, ricc, bank, init_bank=init_bank)
    if cfg.policy_flavor == "offline":
        policy = schedule
    elif cfg.policy_flavor == "greedy":
        policy = make_greedy_policy(cfg.model, ricc, bank, init_bank=init_bank)
    else:
        policy = make_rollout_policy(
            cfg.model, ricc, bank, schedule, cfg.n_samples,
            seed=cfg.seed, init_bank=init_bank,
        )
    result = monte_carlo(
        cfg.model, ricc, bank, policy, cfg.n_runs, cfg.seed,
        init_bank=init_bank, traces_runs=cfg.traces_runs,
    )
    meta = _meta(cfg)
    written = []
    path = out_dir / "summary.json"
    write_summary_json(
        path, result,
        {**meta, "policy": cfg.policy_flavor, "n_runs": cfg.n_runs},
    )
    written.append(path)
    path = out_dir / "utilization.csv"
    write_utilization_csv(path, result.utilization, meta)
    written.append(path)
    if cfg.traces_runs > 0:
        path = out_dir / "traces.csv"
        write_traces_csv(path, result.traces, meta)
        written.append(path)
    if cfg.plot:
        path = out_dir / "utilization.png"
        render_utilization_plot(path, result.utilization)
        written.append(path)
    return written


def cmd_pareto(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write pareto.csv and (optionally) the trade-off figure."""
    if cfg.policy_flavor != "offline":
        raise ConfigError(
            f"policy.flavor: the pareto sweep evaluates offline schedules only, "
            f"got {cfg.policy_flavor!r}"
        )
    bank, init_bank = cfg.build_banks()
    betas = np.asarray(cfg.betas, dtype=float) if cfg.betas else default_beta_grid()
    points = pareto_sweep(
        cfg.model, bank, betas, cfg.n_runs, cfg.seed, init_bank=init_bank,
    )
    meta = _meta(cfg)
    written = []
    path = out_dir / "pareto.csv"
    write_pareto_csv(path, points, meta)
    written.append(path)
    if cfg.plot:
        path = out_dir / "pareto.png"
        render_pareto_plot(path, points)
        written.append(path)
    return written


def _support_bank(cfg: ExperimentConfig, support) -> QuantizerBank:
    """Rebuild the configured bank with moments taken over a finite support."""
    quantizers = []
    if cfg.include_open_loop:
        dim = cfg.model.state_dim
        full_cell = grid_cells([[] for _ in range(dim)])
        quantizers.append(
            build_quantizer_on_support(
                full_cell, support.points, support.probs, 0.0,
                axis_breaks=tuple(() for _ in range(dim)),
            )
        )
    for breaks, cost in zip(cfg.axis_breaks, cfg.costs):
        trusted = tuple(tuple(sorted(float(x) for x in b)) for b in breaks)
        quantizers.append(
            build_quantizer_on_support(
                grid_cells(breaks), support.points, support.probs, cost,
                axis_breaks=trusted,
            )
        )
    return QuantizerBank(quantizers=tuple(quantizers), noise_cov=cfg.model.noise_cov)


def cmd_oracle(cfg: ExperimentConfig, out_dir: Path) -> list[Path]:
    """Write oracle.json for a discretized micro-instance.

    The plant and initial-deviation noises are replaced by tensorized
    Gauss-Hermite supports; the quantizer bank's conditional means are
    recomputed on those supports so the selection-cost accounting stays
    exact on the discrete instance.  Approximate policies (offline, greedy,
    rollout) are evaluated on the identical scenario tree.
    """
    model = cfg.model
    ricc = _solved(cfg)
    support = gauss_hermite_support(model.noise_cov, cfg.oracle_points)
    init_support = gauss_hermite_support(model.init_cov, cfg.oracle_points)
    bank = _support_bank(cfg, support)
    init_bank = _support_bank(cfg, init_support)

    value, table = brute_force_mdp(
        model, ricc, bank, support, model.horizon,
        init_bank=init_bank, init_support=init_support,
    )
    schedule = offline_schedule(model, ricc, bank, init_bank=init_bank)

    def eval_policy(decide) -> float:
        return discretized_policy_value(
            model, ricc, bank, support, decide,
            init_bank=init_bank, init_support=init_support,
        )

    comparisons = {
        "oracle": value,
        "offline": eval_policy(lambda t, s: schedule.selections[t]),
        "greedy": eval_policy(
            lambda t, s: greedy_policy(model, ricc, init_bank if t == 0 else bank, t, s)
        ),
        "rollout": eval_policy(
            lambda t, s: rollout_policy(
                model, ricc, bank, t, s, schedule, cfg.n_samples,
                seed=cfg.seed, init_bank=init_bank, discrete_noise=support,
            )
        ),
    }

    zero = tuple(np.zeros(model.state_dim))
    first_stage = [
        {
            "support_index": j,
            "noise": [float(x) for x in init_support.points[j]],
            "prob": float(init_support.probs[j]),
            "action": int(table[(0, zero, j)]),
        }
        for j in range(init_support.size)
    ]
    meta = {**_meta(cfg), "oracle_points": cfg.oracle_points}

    path = out_dir / "oracle.json"
    write_oracle_json(path, value, first_stage, comparisons, meta)
    return [path]


_COMMANDS = {
    "solve": cmd_solve,
    "simulate": cmd_simulate,
    "pareto": cmd_pareto,
    "oracle": cmd_oracle,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qflqg",
        description="Quantized-feedback LQG control and quantizer-scheduling experiments.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("solve", "write recursion tables and the offline selection schedule"),
        ("simulate", "Monte Carlo closed-loop evaluation of the configured policy"),
        ("pareto", "sweep the cost/price trade-off over a beta grid"),
        ("oracle", "exact optimum of a discretized micro-instance"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="experiment config file (TOML)")
        p.add_argument("--out", help="output directory (default: the config's output.dir)")
        p.add_argument("--seed", type=int, help="override run.seed")
        p.add_argument("--runs", type=int, help="override run.n_runs")
        p.add_argument("--policy", choices=POLICY_FLAVORS, help="override policy.flavor")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(
            cfg, seed=args.seed, runs=args.runs, policy=args.policy, out=args.out,
        )
        out_dir = Path(cfg.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = _COMMANDS[args.command](cfg, out_dir)
        dump_config(cfg, out_dir / "resolved.cfg")
        written.append(out_dir / "resolved.cfg")
        for path in written:
            print(f"wrote {path}")
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except OracleSizeError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
