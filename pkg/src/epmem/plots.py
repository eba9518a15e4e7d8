"""Figure rendering for reports: PNG files next to the CSV output.

Only the command-line report paths import this; the evaluation code itself
never draws anything.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

_METHOD_COLORS = {
    "enc-dec": "tab:gray",
    "replay": "tab:blue",
    "agem": "tab:cyan",
    "mbpa": "tab:olive",
    "mbpa-rand": "tab:orange",
    "mbpa++": "tab:red",
    "mtl": "tab:green",
}


def _color(method: str):
    return _METHOD_COLORS.get(method, "black")


def plot_method_bars(summary: dict, out_path) -> str:
    """Seed-averaged score per method, one bar each."""
    methods = list(summary["methods"])
    avgs = [summary["methods"][m]["avg"] for m in methods]
    fig, ax = plt.subplots(figsize=(1.2 * len(methods) + 2, 4))
    ax.bar(methods, avgs, color=[_color(m) for m in methods])
    for i, v in enumerate(avgs):
        ax.text(i, v + 0.5, f"{v:.1f}", ha="center", fontsize=9)
    ax.set_ylabel("average test score (%)")
    ax.set_ylim(0, 105)
    ax.set_title("final score averaged over datasets")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_forgetting_curves(summary: dict, out_path) -> str:
    """Score per dataset as training advances, for methods with curves."""
    datasets = summary["datasets"]
    with_curves = [m for m in summary["methods"] if "curve" in summary["methods"][m]]
    fig, axes = plt.subplots(
        1, len(datasets), figsize=(5 * len(datasets), 4), sharey=True, squeeze=False
    )
    for j, ds in enumerate(datasets):
        ax = axes[0][j]
        for m in with_curves:
            points = [
                (r["examples_seen"], r["score"])
                for r in summary["methods"][m]["curve"]
                if r["dataset"] == ds
            ]
            points.sort()
            ax.plot(
                [p[0] for p in points],
                [p[1] for p in points],
                marker="o",
                label=m,
                color=_color(m),
            )
        ax.set_title(ds)
        ax.set_xlabel("training examples seen")
        ax.grid(alpha=0.3)
    axes[0][0].set_ylabel("test score (%)")
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_capacity(points: list[dict], out_path) -> str:
    """Score and realized write counts against the write probability."""
    ok = [p for p in points if "error" not in p]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    xs = [p["write_prob"] for p in ok]
    ax1.plot(xs, [p["avg"] for p in ok], marker="o", color="tab:red")
    ax1.set_xlabel("write probability")
    ax1.set_ylabel("average test score (%)")
    ax1.set_title("score vs memory sparsity")
    ax1.grid(alpha=0.3)
    for p in ok:
        ax2.scatter([p["write_prob"]] * len(p["writes"]), p["writes"], color="tab:blue")
        ax2.errorbar(
            p["write_prob"],
            p["expected_writes"],
            yerr=4 * p["write_sigma"],
            fmt="_",
            color="black",
            capsize=4,
        )
    ax2.set_xlabel("write probability")
    ax2.set_ylabel("entries written")
    ax2.set_title("realized writes (bars: expected +/- 4 sigma)")
    ax2.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_retrieval(sweep: dict, out_path) -> str:
    """Score against neighbor count K and adaptation step count L."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ks = sorted(sweep["by_neighbors"])
    ax1.plot(ks, [sweep["by_neighbors"][k] for k in ks], marker="o", color="tab:red")
    ax1.set_xlabel("retrieved neighbors K")
    ax1.set_ylabel("average test score (%)")
    ax1.grid(alpha=0.3)
    ls = sorted(sweep["by_steps"])
    ax2.plot(ls, [sweep["by_steps"][l] for l in ls], marker="o", color="tab:blue")
    ax2.set_xlabel("adaptation steps L")
    ax2.grid(alpha=0.3)
    fig.suptitle("prediction-time retrieval settings")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_scores(rows: list[dict], columns: list[str], out_path) -> str:
    """Grouped bars: one group per dataset column, one bar per row."""
    data_cols = [c for c in columns if c not in ("method", "avg")]
    fig, ax = plt.subplots(figsize=(2 + 1.5 * len(data_cols), 4))
    width = 0.8 / max(1, len(rows))
    for i, row in enumerate(rows):
        xs = [j + i * width for j in range(len(data_cols))]
        ys = [row.get(c) or 0.0 for c in data_cols]
        ax.bar(xs, ys, width=width, label=row.get("method", f"run {i}"),
               color=_color(row.get("method", "")))
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(data_cols))])
    ax.set_xticklabels(data_cols)
    ax.set_ylabel("test score (%)")
    ax.set_ylim(0, 105)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(out_path)


def plot_training_log(log_path, out_path) -> str:
    """Loss trace from a training log, replay events marked."""
    xs, ys, rx, ry = [], [], [], []
    with open(log_path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if "loss" in rec:
                xs.append(rec["examples"])
                ys.append(rec["loss"])
            elif "replay_loss" in rec:
                rx.append(rec["examples"])
                ry.append(rec["replay_loss"])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot(xs, ys, label="stream batches", color="tab:blue")
    if rx:
        ax.scatter(rx, ry, label="replay batches", color="tab:red", zorder=3)
    ax.set_xlabel("training examples seen")
    ax.set_ylabel("batch loss")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return str(Path(out_path))
