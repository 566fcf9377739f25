"""CSV/JSON report writers and the figures rendered alongside them.

All writers are deterministic: identical rows produce byte-identical files
(floats are serialized with shortest round-trip repr, keys are sorted).
"""

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

ERROR_COLUMNS = ["trajectory_id", "t", "epsilon"]
BASELINE_COLUMNS = ["method", "trajectory_id", "t", "epsilon"]


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows):
    """rows: iterable of dicts keyed by `columns`."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def error_summary(rows, key="trajectory_id"):
    """Mean/std over per-trajectory mean errors (Table-1 style)."""
    per_traj = {}
    for row in rows:
        per_traj.setdefault(row[key], []).append(row["epsilon"])
    means = [sum(v) / len(v) for v in per_traj.values()]
    n = len(means)
    mean = sum(means) / n
    std = (sum((m - mean) ** 2 for m in means) / (n - 1)) ** 0.5 if n > 1 else 0.0
    return {"n_trajectories": n, "error_mean": mean, "error_std": std}


def render_error_figure(path, rows, title):
    """epsilon vs t, one line per trajectory."""
    series = {}
    for row in rows:
        series.setdefault(row["trajectory_id"], ([], []))
        series[row["trajectory_id"]][0].append(row["t"])
        series[row["trajectory_id"]][1].append(row["epsilon"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for tid, (t, eps) in sorted(series.items()):
        ax.plot(t, eps, lw=1, label=f"traj {tid}")
    ax.set_xlabel("t")
    ax.set_ylabel(r"normalized error $\epsilon$")
    ax.set_title(title)
    if len(series) <= 10:
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_comparison_figure(path, rows, title):
    """Mean epsilon vs t per method, for baseline/model comparisons."""
    series = {}
    for row in rows:
        series.setdefault(row["method"], {}).setdefault(row["t"], []).append(row["epsilon"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, by_t in sorted(series.items()):
        ts = sorted(by_t)
        ax.plot(ts, [sum(by_t[t]) / len(by_t[t]) for t in ts], lw=1.5, label=method)
    ax.set_xlabel("t")
    ax.set_ylabel(r"mean normalized error $\epsilon$")
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_training_figure(path, rows):
    """Validation ELBO vs step, one line per curriculum stage."""
    series = {}
    for row in rows:
        series.setdefault(row["stage"], ([], []))
        series[row["stage"]][0].append(row["step"])
        series[row["stage"]][1].append(row["val_elbo"])
    fig, ax = plt.subplots(figsize=(6, 4))
    for stage, (steps, vals) in sorted(series.items()):
        ax.plot(steps, vals, lw=1.5, label=f"stage n_eta={stage}")
    ax.set_xlabel("optimizer step")
    ax.set_ylabel("validation ELBO")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
