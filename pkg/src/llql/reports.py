"""Byte-stable emission of reports, learning curves, and sweep tables.

All floats are written with `repr`, which round-trips exactly, so any two
emissions of the same data are byte-identical.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .experiments import EvalReport, compute_aggregates


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_report_csv(report: EvalReport, path) -> None:
    lines = ["seed,steps,success,vel_error,s_out,cum_reward"]
    for r in report.rows:
        lines.append(
            ",".join(
                _fmt(v)
                for v in (r.seed, r.steps, r.success, r.vel_error, r.s_out, r.cum_reward)
            )
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_json(report: EvalReport, path) -> None:
    payload = {
        "env": report.env,
        "meta": report.meta,
        "rows": [
            {
                "seed": r.seed,
                "steps": r.steps,
                "success": r.success,
                "vel_error": r.vel_error,
                "s_out": r.s_out,
                "cum_reward": r.cum_reward,
            }
            for r in report.rows
        ],
        "aggregates": report.aggregates(),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def emit_report(report: EvalReport, out_dir, basename: str = "report", formats=("csv", "json")) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if "csv" in formats:
        p = out_dir / f"{basename}.csv"
        write_report_csv(report, p)
        written.append(p)
    if "json" in formats:
        p = out_dir / f"{basename}.json"
        write_report_json(report, p)
        written.append(p)
    return written


def top_k_logs(logs, k: int = 5):
    """Indices of the k logs with the highest final cumulative reward.

    Ties break toward the lower index (lower seed when logs are in seed
    order).
    """
    order = sorted(range(len(logs)), key=lambda i: (-logs[i][-1].cumulative_reward, i))
    return order[:k]


def write_curves(logs_by_method: dict, path, top_k: int = 5) -> None:
    """Per-episode mean/std reward curves over the top-k logs per method."""
    lines = ["episode,mean_reward,std_reward,method"]
    for method in sorted(logs_by_method):
        logs = logs_by_method[method]
        chosen = [logs[i] for i in top_k_logs(logs, top_k)]
        episodes = min(len(log) for log in chosen)
        for e in range(episodes):
            rewards = np.asarray([log[e].cumulative_reward for log in chosen])
            lines.append(
                f"{e + 1},{repr(float(rewards.mean()))},{repr(float(rewards.std()))},{method}"
            )
    Path(path).write_text("\n".join(lines) + "\n")


def write_sweep(rows, path) -> None:
    lines = ["value,mean_steps,std_steps,success,runs"]
    for r in rows:
        lines.append(
            f"{_fmt(r['value'])},{_fmt(r['mean_steps'])},{_fmt(r['std_steps'])},"
            f"{r['success']},{r['runs']}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def write_table(rows: list, columns: list, path) -> None:
    """Generic comparison table: list of dicts -> CSV with given columns."""
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_fmt(r.get(c)) for c in columns))
    Path(path).write_text("\n".join(lines) + "\n")
