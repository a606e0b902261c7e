"""Delimited/JSON output writers and the figure renderers.

Every file carries the resolved seed and config hash (CSV: a leading
comment line; JSON: a "meta" object).  Floats are written with 17
significant digits so audits can reproduce results bit for bit.  Figures
are rendered with the Agg backend and pinned metadata, so re-renders of
the same data are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
import numpy as np

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_PNG_META = {"Software": "qflqg"}
_DPI = 144


def _fmt(value: float) -> str:
    return format(float(value), ".17g")


def _meta_line(meta: dict) -> str:
    return "# " + " ".join(f"{k}={v}" for k, v in meta.items())


def _write_csv(path: Path, meta: dict, header: list[str], rows) -> None:
    lines = [_meta_line(meta), ",".join(header)]
    for row in rows:
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def _mat_cols(prefix: str, rows: int, cols: int) -> list[str]:
    return [f"{prefix}_{i}_{j}" for i in range(rows) for j in range(cols)]


def write_riccati_csv(path, ricc, meta: dict) -> None:
    """Stage-indexed dump of every recursion output (one row per stage).

    Gain/error/selection weights stop one stage before the horizon; their
    columns are empty in the final row.
    """
    horizon = ricc.gain.shape[0]
    n = ricc.cost_to_go.shape[1]
    m = ricc.gain.shape[1]
    header = (
        ["k"]
        + _mat_cols("cost_to_go", n, n)
        + _mat_cols("gain", m, n)
        + _mat_cols("error_weight", n, n)
        + ["noise_offset"]
        + _mat_cols("future_error_weight", n, n)
        + _mat_cols("uncontrolled_cost", n, n)
        + _mat_cols("selection_weight", n, n)
    )

    def cells(mat) -> list[str]:
        return [_fmt(v) for v in np.asarray(mat).ravel()]

    rows = []
    for k in range(horizon + 1):
        last = k == horizon
        row = [str(k)]
        row += cells(ricc.cost_to_go[k])
        row += [""] * (m * n) if last else cells(ricc.gain[k])
        row += [""] * (n * n) if last else cells(ricc.error_weight[k])
        row += [_fmt(ricc.noise_offset[k])]
        row += cells(ricc.future_error_weight[k])
        row += cells(ricc.uncontrolled_cost[k])
        row += [""] * (n * n) if last else cells(ricc.selection_weight[k])
        rows.append(row)
    _write_csv(path, meta, header, rows)


def write_schedule_csv(path, schedule, meta: dict) -> None:
    n_quantizers = schedule.scores.shape[1]
    header = ["k", "selection"] + [f"score_{i}" for i in range(n_quantizers)]
    rows = [
        [str(k), str(schedule.selections[k])] + [_fmt(s) for s in schedule.scores[k]]
        for k in range(len(schedule.selections))
    ]
    _write_csv(path, meta, header, rows)


def write_utilization_csv(path, rho: np.ndarray, meta: dict) -> None:
    horizon, n_quantizers = rho.shape
    header = ["t"] + [f"usage_{i}" for i in range(n_quantizers)]
    rows = [[str(t + 1)] + [_fmt(v) for v in rho[t]] for t in range(horizon)]
    _write_csv(path, meta, header, rows)


def write_summary_json(path, result, meta: dict) -> None:
    payload = {
        "meta": meta,
        "mean_cost": result.mean_cost,
        "stderr": result.stderr,
        "control_cost": result.mean_control_cost,
        "quant_cost": result.mean_quant_cost,
        "bit_rate": result.bit_rate,
        "n_runs": result.n_runs,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def write_traces_csv(path, traces, meta: dict) -> None:
    """Long-format per-step dump of the recorded runs.

    The final row of each run carries the terminal state/cost only; input,
    selection and estimate columns are empty there.
    """
    if not traces:
        return
    n = traces[0].states.shape[1]
    m = traces[0].inputs.shape[1]
    horizon = traces[0].inputs.shape[0]
    header = (
        ["run", "t"]
        + [f"state_{i}" for i in range(n)]
        + [f"input_{i}" for i in range(m)]
        + ["selection"]
        + [f"centroid_{i}" for i in range(n)]
        + [f"filtered_{i}" for i in range(n)]
        + [f"predicted_{i}" for i in range(n)]
        + [f"error_{i}" for i in range(n)]
        + ["control_cost", "quant_cost"]
    )
    rows = []
    for run, tr in enumerate(traces):
        for t in range(horizon + 1):
            last = t == horizon
            row = [str(run), str(t)]
            row += [_fmt(v) for v in tr.states[t]]
            row += [""] * m if last else [_fmt(v) for v in tr.inputs[t]]
            row += [""] if last else [str(int(tr.selections[t]))]
            row += [""] * n if last else [_fmt(v) for v in tr.centroids[t]]
            row += [""] * n if last else [_fmt(v) for v in tr.x_filtered[t]]
            row += [_fmt(v) for v in tr.x_predicted[t]]
            row += [""] * n if last else [_fmt(v) for v in tr.errors[t]]
            row += [_fmt(tr.control_costs[t])]
            row += [""] if last else [_fmt(tr.quant_costs[t])]
            rows.append(row)
    _write_csv(path, meta, header, rows)


def write_pareto_csv(path, points, meta: dict) -> None:
    header = ["beta", "control_cost", "quant_cost", "control_stderr", "dominated"]
    rows = [
        [_fmt(p.beta), _fmt(p.control_cost), _fmt(p.quant_cost),
         _fmt(p.control_stderr), str(int(p.dominated))]
        for p in points
    ]
    _write_csv(path, meta, header, rows)


def write_oracle_json(path, optimal_value, first_stage, comparisons, meta: dict) -> None:
    payload = {
        "meta": meta,
        "optimal_value": optimal_value,
        "first_stage": first_stage,
        "policy_values": comparisons,
    }
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def render_schedule_plot(path, schedule) -> None:
    """Selected quantizer index over time (displayed one-based)."""
    sel = np.asarray(schedule.selections, dtype=int)
    fig, ax = plt.subplots(figsize=(7, 3))
    ax.step(np.arange(len(sel)), sel + 1, where="post", lw=1.8)
    ax.set_xlabel("time step")
    ax.set_ylabel("selected quantizer")
    ax.set_yticks(np.arange(1, schedule.scores.shape[1] + 1))
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)


def render_utilization_plot(path, rho: np.ndarray) -> None:
    """Running usage fraction of each quantizer."""
    horizon = rho.shape[0]
    fig, ax = plt.subplots(figsize=(7, 4))
    steps = np.arange(1, horizon + 1)
    for i in range(rho.shape[1]):
        ax.plot(steps, rho[:, i], lw=1.6, label=f"quantizer {i + 1}")
    ax.set_xlabel("time step")
    ax.set_ylabel("usage fraction")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)


def render_pareto_plot(path, points) -> None:
    """Control cost against quantization spend; dominated points crossed out."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    front = sorted((p for p in points if not p.dominated), key=lambda p: p.quant_cost)
    if front:
        ax.plot([p.quant_cost for p in front], [p.control_cost for p in front],
                "o-", lw=1.4, ms=4, label="frontier")
    dom = [p for p in points if p.dominated]
    if dom:
        ax.plot([p.quant_cost for p in dom], [p.control_cost for p in dom],
                "x", color="gray", ms=5, label="dominated")
    ax.set_xlabel("quantization cost")
    ax.set_ylabel("control cost")
    if front or dom:
        ax.legend(loc="best")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI, metadata=_PNG_META)
    plt.close(fig)
