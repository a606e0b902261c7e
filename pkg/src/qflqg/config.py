"""Experiment configuration: loading, validation, canonical round-trip.

Configs are TOML with five blocks — model, bank, policy, run, output.
Matrices are nested arrays, row-major.  The resolved configuration (after
any command-line overrides) has a canonical serialization; its SHA-256 is
stamped into every output file, and re-running from the serialized
resolved config reproduces outputs byte for byte.  The hash covers the
science blocks only (model/bank/policy/run), so moving the output
directory does not change result content.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

import numpy as np

from .errors import ConfigError
from .model import SystemModel
from .quantizers import QuantizerBank, build_bank

POLICY_FLAVORS = ("offline", "greedy", "rollout", "oracle")

_MODEL_MATRICES = (
    "state_matrix",
    "input_matrix",
    "noise_cov",
    "init_cov",
    "state_weight",
    "terminal_weight",
    "input_weight",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully-resolved experiment description."""

    model: SystemModel
    axis_breaks: tuple          # per quantizer: per-axis breakpoint tuples
    costs: tuple                # per listed quantizer (open-loop excluded)
    include_open_loop: bool
    policy_flavor: str
    n_samples: int
    oracle_points: int
    n_runs: int
    seed: int
    betas: tuple
    out_dir: str
    traces_runs: int
    plot: bool

    def build_banks(self) -> tuple[QuantizerBank, QuantizerBank]:
        """Banks against the process-noise and initial covariances, in that order."""
        step = build_bank(
            self.axis_breaks, self.costs, self.model.noise_cov,
            include_open_loop=self.include_open_loop,
        )
        init = build_bank(
            self.axis_breaks, self.costs, self.model.init_cov,
            include_open_loop=self.include_open_loop,
        )
        return step, init

    def resolved_dict(self) -> dict:
        m = self.model
        return {
            "model": {
                "state_matrix": m.state_matrix.tolist(),
                "input_matrix": m.input_matrix.tolist(),
                "noise_cov": m.noise_cov.tolist(),
                "init_mean": m.init_mean.tolist(),
                "init_cov": m.init_cov.tolist(),
                "state_weight": m.state_weight.tolist(),
                "terminal_weight": m.terminal_weight.tolist(),
                "input_weight": m.input_weight.tolist(),
                "horizon": m.horizon,
            },
            "bank": {
                "include_open_loop": self.include_open_loop,
                "quantizers": [
                    {"breaks": [list(axis) for axis in q], "cost": float(c)}
                    for q, c in zip(self.axis_breaks, self.costs)
                ],
            },
            "policy": {
                "flavor": self.policy_flavor,
                "n_samples": self.n_samples,
                "oracle_points": self.oracle_points,
            },
            "run": {
                "n_runs": self.n_runs,
                "seed": self.seed,
                "betas": [float(b) for b in self.betas],
            },
            "output": {
                "dir": self.out_dir,
                "traces_runs": self.traces_runs,
                "plot": self.plot,
            },
        }

    def config_hash(self) -> str:
        science = {k: v for k, v in self.resolved_dict().items() if k != "output"}
        blob = json.dumps(science, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def _require(table: dict, key: str, context: str):
    if key not in table:
        raise ConfigError(f"{context}.{key}: missing required key")
    return table[key]


def _int_field(table: dict, key: str, context: str, minimum: int | None = None) -> int:
    val = _require(table, key, context)
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{context}.{key}: expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigError(f"{context}.{key}: must be >= {minimum}, got {val}")
    return val


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config.

    Raises:
        ConfigError: with a field-anchored message on any structural or
            semantic problem.
    """
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error in {path}: {exc}") from exc
    return config_from_dict(raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    for block in ("model", "bank"):
        if block not in raw:
            raise ConfigError(f"{block}: missing required block")
    model_tbl = raw["model"]
    bank_tbl = raw["bank"]
    policy_tbl = raw.get("policy", {})
    run_tbl = raw.get("run", {})
    out_tbl = raw.get("output", {})

    matrices = {}
    for key in _MODEL_MATRICES:
        val = _require(model_tbl, key, "model")
        arr = np.asarray(val, dtype=float)
        if arr.ndim != 2:
            raise ConfigError(f"model.{key}: expected a nested (row-major) array of rows")
        matrices[key] = arr
    if matrices["state_matrix"].shape[0] != matrices["state_matrix"].shape[1]:
        raise ConfigError(
            f"model.state_matrix: expected a square matrix, got shape "
            f"{matrices['state_matrix'].shape}"
        )
    init_mean = np.asarray(_require(model_tbl, "init_mean", "model"), dtype=float)
    horizon = _int_field(model_tbl, "horizon", "model", minimum=1)

    quantizer_tbls = _require(bank_tbl, "quantizers", "bank")
    if not isinstance(quantizer_tbls, list) or not quantizer_tbls:
        raise ConfigError("bank.quantizers: expected a non-empty array of tables")
    include_open_loop = bool(bank_tbl.get("include_open_loop", False))
    dim = matrices["state_matrix"].shape[0]
    axis_breaks, costs = [], []
    for qi, tbl in enumerate(quantizer_tbls):
        breaks = _require(tbl, "breaks", f"bank.quantizers[{qi}]")
        if not isinstance(breaks, list) or len(breaks) != dim:
            raise ConfigError(
                f"bank.quantizers[{qi}].breaks: expected {dim} per-axis lists "
                f"(state dimension), got {breaks!r}"
            )
        axis_breaks.append(tuple(tuple(float(x) for x in axis) for axis in breaks))
        cost = _require(tbl, "cost", f"bank.quantizers[{qi}]")
        if not isinstance(cost, (int, float)) or isinstance(cost, bool) or cost < 0:
            raise ConfigError(f"bank.quantizers[{qi}].cost: expected a nonnegative number")
        costs.append(float(cost))

    flavor = policy_tbl.get("flavor", "offline")
    if flavor not in POLICY_FLAVORS:
        raise ConfigError(
            f"policy.flavor: {flavor!r} is not one of {', '.join(POLICY_FLAVORS)}"
        )
    n_samples = policy_tbl.get("n_samples", 64)
    if not isinstance(n_samples, int) or isinstance(n_samples, bool) or n_samples < 1:
        raise ConfigError(f"policy.n_samples: expected a positive integer, got {n_samples!r}")
    oracle_points = policy_tbl.get("oracle_points", 3)
    if oracle_points not in (3, 5):
        raise ConfigError(f"policy.oracle_points: expected 3 or 5, got {oracle_points!r}")

    n_runs = run_tbl.get("n_runs", 10_000)
    if not isinstance(n_runs, int) or isinstance(n_runs, bool) or n_runs < 1:
        raise ConfigError(f"run.n_runs: expected a positive integer, got {n_runs!r}")
    seed = run_tbl.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"run.seed: expected an integer, got {seed!r}")
    betas = run_tbl.get("betas", [])
    if not isinstance(betas, list):
        raise ConfigError("run.betas: expected an array of numbers in (0, 1]")
    for b in betas:
        if not isinstance(b, (int, float)) or isinstance(b, bool) or not 0.0 < float(b) <= 1.0:
            raise ConfigError(f"run.betas: entries must lie in (0, 1], got {b!r}")

    out_dir = out_tbl.get("dir", "out")
    if not isinstance(out_dir, str):
        raise ConfigError(f"output.dir: expected a string, got {out_dir!r}")
    traces_runs = out_tbl.get("traces_runs", 0)
    if not isinstance(traces_runs, int) or isinstance(traces_runs, bool) or traces_runs < 0:
        raise ConfigError(f"output.traces_runs: expected a nonnegative integer, got {traces_runs!r}")
    plot = out_tbl.get("plot", True)
    if not isinstance(plot, bool):
        raise ConfigError(f"output.plot: expected a boolean, got {plot!r}")

    quantizer_costs = ([0.0] if include_open_loop else []) + costs
    model = SystemModel(
        state_matrix=matrices["state_matrix"],
        input_matrix=matrices["input_matrix"],
        noise_cov=matrices["noise_cov"],
        init_mean=init_mean,
        init_cov=matrices["init_cov"],
        state_weight=matrices["state_weight"],
        terminal_weight=matrices["terminal_weight"],
        input_weight=matrices["input_weight"],
        horizon=horizon,
        quantizer_costs=np.asarray(quantizer_costs),
    )
    return ExperimentConfig(
        model=model,
        axis_breaks=tuple(axis_breaks),
        costs=tuple(costs),
        include_open_loop=include_open_loop,
        policy_flavor=flavor,
        n_samples=n_samples,
        oracle_points=oracle_points,
        n_runs=n_runs,
        seed=seed,
        betas=tuple(float(b) for b in betas),
        out_dir=out_dir,
        traces_runs=traces_runs,
        plot=plot,
    )


def apply_overrides(
    cfg: ExperimentConfig,
    seed: int | None = None,
    runs: int | None = None,
    policy: str | None = None,
    out: str | None = None,
) -> ExperimentConfig:
    """Fold command-line overrides into the config before hashing."""
    if policy is not None and policy not in POLICY_FLAVORS:
        raise ConfigError(f"--policy: {policy!r} is not one of {', '.join(POLICY_FLAVORS)}")
    if runs is not None and runs < 1:
        raise ConfigError(f"--runs: must be >= 1, got {runs}")
    updates = {}
    if seed is not None:
        updates["seed"] = int(seed)
    if runs is not None:
        updates["n_runs"] = int(runs)
    if policy is not None:
        updates["policy_flavor"] = policy
    if out is not None:
        updates["out_dir"] = str(out)
    return replace(cfg, **updates) if updates else cfg


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        text = repr(value)
        return text if any(c in text for c in ".einf") else text + ".0"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise ConfigError(f"cannot serialize config value {value!r}")


def dump_config(cfg: ExperimentConfig, path) -> None:
    """Write the canonical TOML form of a resolved config."""
    data = cfg.resolved_dict()
    lines = []
    for block in ("model", "bank", "policy", "run", "output"):
        table = data[block]
        lines.append(f"[{block}]")
        for key, value in table.items():
            if key == "quantizers":
                continue
            lines.append(f"{key} = {_toml_value(value)}")
        if block == "bank":
            for q in table["quantizers"]:
                lines.append("")
                lines.append("[[bank.quantizers]]")
                lines.append(f"breaks = {_toml_value(q['breaks'])}")
                lines.append(f"cost = {_toml_value(float(q['cost']))}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
