"""Trend summaries and SVG plots over sweep records.

The two headline views mirror the synthetic-experiment figures: capacity
against total parameters (memorization should follow total parameters
regardless of how many are active) and test accuracy against total
parameters (reasoning should follow active parameters instead). Curves are
grouped by active-parameter tier: all dense points form the baseline curve,
MoE points group by (d, top_k) since their active count barely moves with E.
"""

from __future__ import annotations

import json
import math
import os
from collections import defaultdict

import numpy as np
from scipy import stats

from .sweep import ExperimentRecord, read_records_csv

__all__ = [
    "aggregate",
    "spearman_vs_experts",
    "spearman_vs_width",
    "dense_curve_gap",
    "render_report",
]


def aggregate(records: list[ExperimentRecord], metric: str) -> list[dict]:
    """Mean metric per model config (over seeds), with parameter counts."""
    groups: dict[tuple, list[ExperimentRecord]] = defaultdict(list)
    for r in records:
        if r.metric_name == metric:
            groups[(r.arch, r.d, r.L, r.E, r.top_k)].append(r)
    out = []
    for (arch, d, L, E, top_k), rs in sorted(groups.items()):
        out.append(
            {
                "arch": arch,
                "d": d,
                "L": L,
                "E": E,
                "top_k": top_k,
                "total_params": rs[0].total_params,
                "active_params": rs[0].active_params,
                "mean": float(np.mean([r.metric_value for r in rs])),
                "values": [r.metric_value for r in rs],
                "seeds": len(rs),
            }
        )
    return out


def _spearman(xs: list[float], ys: list[float]) -> float | None:
    if len(xs) < 2:
        return None
    rho = stats.spearmanr(xs, ys).statistic
    return None if np.isnan(rho) else float(rho)


def spearman_vs_experts(
    records: list[ExperimentRecord], metric: str, d: int
) -> float | None:
    """Rank correlation of the seed-mean metric against expert count at fixed
    width (MoE rows only). None when fewer than two expert levels exist."""
    rows = [g for g in aggregate(records, metric) if g["arch"] == "moe" and g["d"] == d]
    return _spearman([g["E"] for g in rows], [g["mean"] for g in rows])


def spearman_vs_width(
    records: list[ExperimentRecord], metric: str, E: int
) -> float | None:
    rows = [g for g in aggregate(records, metric) if g["E"] == E]
    return _spearman([g["d"] for g in rows], [g["mean"] for g in rows])


def dense_curve_gap(records: list[ExperimentRecord], metric: str = "capacity") -> dict:
    """Vertical log2 gap between each MoE point and the dense curve read at
    the same total parameter count (log-log interpolation, clamped ends).

    This quantifies the "capacity tracks total parameters" phenomenon: a gap
    within one size-grid step (|log2 ratio| <= 1) means the MoE curve lies on
    the dense curve up to grid resolution.
    """
    agg = aggregate(records, metric)
    dense = sorted(
        [g for g in agg if g["arch"] == "dense" and g["mean"] > 0],
        key=lambda g: g["total_params"],
    )
    moe = [g for g in agg if g["arch"] == "moe"]
    if len(dense) < 2 or not moe:
        return {"defined": False, "reason": "need >=2 dense points and >=1 moe point"}
    dx = np.log2([g["total_params"] for g in dense])
    dy = np.log2([g["mean"] for g in dense])
    gaps = []
    for g in moe:
        if g["mean"] <= 0:
            gaps.append({"d": g["d"], "E": g["E"], "gap_log2": None, "note": "zero capacity"})
            continue
        y_hat = float(np.interp(np.log2(g["total_params"]), dx, dy))
        gaps.append(
            {
                "d": g["d"],
                "E": g["E"],
                "total_params": g["total_params"],
                "moe_value": g["mean"],
                "dense_interp": 2**y_hat,
                "gap_log2": float(np.log2(g["mean"]) - y_hat),
            }
        )
    finite = [abs(x["gap_log2"]) for x in gaps if x["gap_log2"] is not None]
    return {
        "defined": bool(finite),
        "per_point": gaps,
        "max_abs_gap_log2": max(finite) if finite else None,
    }


def _tier_label(g: dict) -> str:
    if g["arch"] == "dense":
        return "dense"
    return f"moe d={g['d']} top{g['top_k']} (active~{g['active_params']:,})"


def _plot(agg: list[dict], metric: str, path: str, logy: bool) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.2))
    tiers: dict[str, list[dict]] = defaultdict(list)
    for g in agg:
        tiers[_tier_label(g)].append(g)
    for label, rows in sorted(tiers.items()):
        rows = sorted(rows, key=lambda g: g["total_params"])
        xs = [g["total_params"] for g in rows]
        ys = [g["mean"] for g in rows]
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xscale("log", base=2)
    if logy and all(g["mean"] > 0 for g in agg):
        ax.set_yscale("log", base=2)
    ax.set_xlabel("total non-embedding parameters")
    ax.set_ylabel(metric)
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def render_report(csv_path: str, out_dir: str, echo=print) -> dict:
    """Emit SVG plots and a JSON summary for one records CSV."""
    records = read_records_csv(csv_path)
    os.makedirs(out_dir, exist_ok=True)
    metrics = sorted({r.metric_name for r in records})
    summary: dict = {"csv": csv_path, "num_records": len(records), "metrics": {}}
    for metric in metrics:
        agg = aggregate(records, metric)
        if not agg:
            continue
        widths = sorted({g["d"] for g in agg if g["arch"] == "moe"})
        experts = sorted({g["E"] for g in agg})
        entry = {
            "table": agg,
            "spearman_vs_E_at_fixed_d": {
                str(d): spearman_vs_experts(records, metric, d) for d in widths
            },
            "spearman_vs_d_at_fixed_E": {
                str(E): spearman_vs_width(records, metric, E) for E in experts
            },
        }
        if metric == "capacity":
            entry["dense_curve_gap"] = dense_curve_gap(records, metric)
        plot_path = os.path.join(out_dir, f"{metric}_vs_total_params.svg")
        _plot(agg, metric, plot_path, logy=metric == "capacity")
        entry["plot"] = plot_path
        summary["metrics"][metric] = entry

        echo(f"[{metric}]")
        for g in agg:
            echo(
                f"  {g['arch']:>5} d={g['d']:>4} E={g['E']:>3} "
                f"total={g['total_params']:>8,} active={g['active_params']:>8,} "
                f"mean={g['mean']:.4g} (n={g['seeds']})"
            )
        for d, rho in entry["spearman_vs_E_at_fixed_d"].items():
            echo(f"  spearman(metric, E | d={d}) = {rho if rho is not None else 'undefined'}")
        for E, rho in entry["spearman_vs_d_at_fixed_E"].items():
            echo(f"  spearman(metric, d | E={E}) = {rho if rho is not None else 'undefined'}")

    summary_path = os.path.join(out_dir, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    summary["summary_path"] = summary_path
    return summary
