"""Figure rendering for the report paths: every CSV the harness emits can be
accompanied by a PNG next to it. The CSVs stay the contract; these plots are
a convenience layer for eyeballing runs."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _new_fig(width: float = 6.0):
    return plt.subplots(figsize=(width, width * GOLDEN))


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_run_curves(records, path, metric: str = "accuracy") -> None:
    """Loss and one metric over rounds for a single run."""
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 4.5 * GOLDEN))
    for split, style in (("train", "--"), ("test", "-")):
        rows = [r for r in records if r.split == split]
        rounds = [r.round for r in rows]
        axes[0].plot(rounds, [r.loss for r in rows], style, label=split)
        axes[1].plot(rounds, [getattr(r, metric) for r in rows], style, label=split)
    axes[0].set_xlabel("round")
    axes[0].set_ylabel("loss")
    axes[1].set_xlabel("round")
    axes[1].set_ylabel(metric)
    axes[0].legend()
    _save(fig, path)


def save_bench_curves(records, path, metric: str = "accuracy") -> None:
    """Mean test metric over rounds, one curve per strategy (seeds averaged)."""
    by_strategy = defaultdict(lambda: defaultdict(list))
    for r in records:
        if r.split == "test":
            by_strategy[r.strategy][r.round].append(getattr(r, metric))
    fig, ax = _new_fig()
    for strategy in sorted(by_strategy):
        rounds = sorted(by_strategy[strategy])
        means = [float(np.mean(by_strategy[strategy][t])) for t in rounds]
        ax.plot(rounds, means, label=strategy)
    ax.set_xlabel("round")
    ax.set_ylabel(f"test {metric}")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_bench_final(rows, path, metric: str = "accuracy") -> None:
    """Bar chart of final test metric per cell with seed std as error bars.

    rows: dicts with keys strategy, alpha, <metric>_mean, <metric>_std.
    """
    labels = []
    means = []
    stds = []
    for row in rows:
        label = row["strategy"]
        if row.get("alpha") not in (None, ""):
            label += f"\nα={row['alpha']}"
        labels.append(label)
        means.append(float(row[f"{metric}_mean"]))
        stds.append(float(row[f"{metric}_std"]))
    stds = np.nan_to_num(np.asarray(stds))  # single-seed cells have no std
    fig, ax = _new_fig(max(6.0, 0.9 * len(labels)))
    ax.bar(range(len(labels)), means, yerr=stds, capsize=3)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel(f"final test {metric}")
    _save(fig, path)


def save_ablation(rows, path, axis_name: str) -> None:
    """rows: dicts with keys value, accuracy_mean, accuracy_std."""
    values = [row["value"] for row in rows]
    means = np.array([row["accuracy_mean"] for row in rows], dtype=float)
    stds = np.nan_to_num(np.array([row["accuracy_std"] for row in rows], dtype=float))
    fig, ax = _new_fig()
    ax.errorbar(values, means, yerr=stds, marker="o", capsize=3)
    ax.set_xlabel(axis_name)
    ax.set_ylabel("final test accuracy")
    _save(fig, path)


def save_toy_scatter(report, path) -> None:
    """Cycle vs end-to-end client step on the toy grid, with the y=x line."""
    e2e = np.array([r.step_e2e for r in report.rows])
    cyc = np.array([r.step_cycle for r in report.rows])
    holds = np.array([r.holds for r in report.rows])
    fig, ax = _new_fig()
    ax.scatter(e2e[holds], cyc[holds], s=4, alpha=0.4, label="cycle < end-to-end")
    if (~holds).any():
        ax.scatter(e2e[~holds], cyc[~holds], s=8, color="red", label="violation")
    lim = max(e2e.max(), cyc.max()) * 1.05
    ax.plot([0, lim], [0, lim], "k--", linewidth=0.8)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("end-to-end client step")
    ax.set_ylabel("cycle client step")
    ax.legend(fontsize=8)
    _save(fig, path)


def save_grad_norms(norms_by_strategy: dict, path) -> None:
    """Mean cut-gradient norm per strategy (final-window average)."""
    labels = sorted(norms_by_strategy)
    values = [norms_by_strategy[s] for s in labels]
    fig, ax = _new_fig()
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, fontsize=8)
    ax.set_ylabel("mean cut-gradient norm")
    _save(fig, path)
