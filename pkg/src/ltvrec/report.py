"""End-of-run artifacts: MSE table, value/p-value table, rank histograms and
the gamma sweep of LSTDQ weights.

:func:`emit_report` only formats persisted records, so regenerating a report
from the same records gives identical bytes.
"""
from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .estimators import lstdq, q_batch
from .policies import action_ranks

N_RANK_BINS = 50
BLOCKS = ("state", "item", "product", "constant")


class MissingRecordError(RuntimeError):
    def __init__(self, stage, what):
        super().__init__(f"missing record {what!r}; run the {stage!r} stage first")
        self.stage = stage


def default_gamma_grid(dataset_gamma: float | None) -> list[float]:
    grid = [0.0, 0.5, 0.9, 0.99]
    if dataset_gamma is not None and dataset_gamma not in grid:
        grid.append(float(dataset_gamma))
    return sorted(grid)


def gamma_sweep(traj, V, grid, epsilon: float | None = None) -> dict:
    """LSTDQ weights for each discount, normalized by the constant weight.

    Returns ``{"gamma": [...], "log_abs": [[...], ...], "blocks": [...]}``
    with ``None`` where a weight (or the normalizer) is exactly zero.
    """
    batch = q_batch(traj, V)
    k = V.shape[0]
    rows = []
    for g in grid:
        if not 0.0 <= g < 1.0:
            raise ValueError(f"gamma {g} outside [0, 1)")
        theta = lstdq(batch, g, epsilon).theta
        scale = abs(theta[-1])
        with np.errstate(divide="ignore"):
            la = np.log(np.abs(theta) / scale) if scale > 0 else np.full(theta.size, -np.inf)
        rows.append([None if not np.isfinite(x) else float(x) for x in la])
    blocks = ["state"] * k + ["item"] * k + ["product"] * k + ["constant"]
    return {"gamma": [float(g) for g in grid], "log_abs": rows, "blocks": blocks}


def block_means(sweep: dict) -> dict:
    """Mean log-absolute weight per feature block for every swept gamma."""
    blocks = np.array(sweep["blocks"])
    out = {}
    for name in BLOCKS[:3]:
        sel = blocks == name
        vals = []
        for row in sweep["log_abs"]:
            x = [v for v, s in zip(row, sel) if s and v is not None]
            vals.append(float(np.mean(x)) if x else None)
        out[name] = vals
    return out


def rank_histogram(w, traj, V, n_bins: int = N_RANK_BINS) -> dict:
    """Histogram of the logged items' ranks under policy ``w``.

    Bins split ``[1, n_items]`` into equal-width intervals.
    """
    n = V.shape[1]
    ranks = action_ranks(w, traj.states, traj.items, V)
    edges = np.linspace(1, n + 1, n_bins + 1)
    counts, _ = np.histogram(ranks, bins=edges)
    return {"edges": [float(e) for e in edges], "counts": [int(c) for c in counts],
            "n_items": int(n), "n_steps": int(ranks.size),
            "mean_rank": float(ranks.mean()), "median_rank": float(np.median(ranks))}


def _fmt(x, digits=4):
    if x is None:
        return "-"
    if isinstance(x, float):
        return f"{x:.{digits}g}"
    return str(x)


def _table(header, rows) -> str:
    cells = [header] + [[_fmt(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def build_report(records: dict) -> dict:
    """Assemble the structured report from persisted stage records."""
    for key, stage in (("cv", "factorize"), ("compare", "compare"), ("sweep", "evaluate"),
                       ("ranks", "improve"), ("meta", "ingest")):
        if key not in records:
            raise MissingRecordError(stage, key)
    cv, cmp_ = records["cv"], records["compare"]
    mse_rows = [{"method": m, "mean": r["mean"], "sd": r["sd"], "folds": len(r["fold_mse"])}
                for m, r in cv["methods"].items()]
    value_rows = [{"policy": name, "mean": v["mean"], "half_width": v["half_width"],
                   "estimator": v["estimator"], "B": v["B"]}
                  for name, v in cmp_["values"].items()]
    p_rows = [{"baseline": p["baseline"], "candidate": p["candidate"], "p_value": p["p_value"],
               "w_plus": p["w_plus"], "n": p["n"], "method": p["method"]}
              for p in cmp_["pairs"]]
    hist = {name: {"counts": h["counts"], "edges": h["edges"], "total": sum(h["counts"]),
                   "mean_rank": h["mean_rank"]} for name, h in records["ranks"].items()}
    return {"mse_table": mse_rows, "value_table": value_rows, "p_values": p_rows,
            "rank_histograms": hist, "gamma_sweep": records["sweep"],
            "gamma_sweep_block_means": block_means(records["sweep"]),
            "metadata": records["meta"]}


def render_text(rep: dict) -> str:
    meta = rep["metadata"]
    out = [
        "Lifetime-value recommender evaluation",
        "",
        f"users={meta.get('n_users')} items={meta.get('n_items')} samples={meta.get('n_samples')} "
        f"gamma={_fmt(meta.get('gamma'))} k={meta.get('k')} method={meta.get('method')} "
        f"seed={meta.get('seed')}",
        "",
        f"Held-out MSE ({meta.get('folds')}-fold cross-validation, mean +- sd, original reward units)",
        _table(["method", "mse", "sd"], [[r["method"], r["mean"], r["sd"]] for r in rep["mse_table"]]),
        "",
        "Policy values (bootstrap mean +- 95% half-width)",
        _table(["policy", "value", "half-width", "estimator", "B"],
               [[r["policy"], r["mean"], r["half_width"], r["estimator"], r["B"]]
                for r in rep["value_table"]]),
        "",
        "One-sided Wilcoxon signed-rank tests (H1: candidate > baseline)",
        _table(["baseline", "candidate", "p-value", "W+", "n"],
               [[r["baseline"], r["candidate"], r["p_value"], r["w_plus"], r["n"]]
                for r in rep["p_values"]]),
        "",
        "Logged-item ranks",
        _table(["policy", "mean rank", "steps"],
               [[name, h["mean_rank"], h["total"]] for name, h in rep["rank_histograms"].items()]),
        "",
        "Gamma sweep: mean log|theta_Q| per block (normalized by constant weight)",
        _table(["gamma", "state", "item", "product"],
               [[g] + [rep["gamma_sweep_block_means"][b][i] for b in ("state", "item", "product")]
                for i, g in enumerate(rep["gamma_sweep"]["gamma"])]),
        "",
    ]
    return "\n".join(out)


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def emit_report(records: dict, out_dir) -> dict:
    """Write ``report.txt``, ``report.json``, ``rank_hist_<policy>.csv`` and
    ``gamma_sweep.csv`` into ``out_dir``; returns the structured report."""
    rep = build_report(records)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(rep, sort_keys=True, indent=1) + "\n")
    (out / "report.txt").write_text(render_text(rep))
    for name, h in rep["rank_histograms"].items():
        rows = [["bin_lo", "bin_hi", "count"]]
        rows += [[repr(lo), repr(hi), c] for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"])]
        (out / f"rank_hist_{name}.csv").write_text(_csv(rows))
    sweep = rep["gamma_sweep"]
    rows = [["gamma", "feature", "block", "log_abs"]]
    for g, vals in zip(sweep["gamma"], sweep["log_abs"]):
        for i, (v, b) in enumerate(zip(vals, sweep["blocks"])):
            rows.append([repr(g), i, b, "" if v is None else repr(v)])
    (out / "gamma_sweep.csv").write_text(_csv(rows))
    return rep
