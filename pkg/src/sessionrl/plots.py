"""Figure rendering for the report paths: learning curves, metric deltas,
and training-progress plots, written next to the CSV/JSON outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalbench import AblationResult, ComparisonResult
from .pipeline import MetricsRow


def plot_ablation_curves(result: AblationResult, path, title: str | None = None) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = np.asarray(result.steps)
    for variant in result.series:
        mean = result.mean(variant)
        std = result.std(variant)
        ax.plot(steps, mean, marker="o", markersize=3, label=variant)
        ax.fill_between(steps, mean - std, mean + std, alpha=0.15)
    ax.set_xlabel("training steps")
    ax.set_ylabel("mean evaluation return")
    ax.set_title(title or f"ablation: {result.axis}")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_comparison(result: ComparisonResult, path) -> None:
    names = [k for k, v in result.deltas.items() if v is not None and k != "mean_return"]
    values = [100.0 * result.deltas[k] for k in names]
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:green" if v >= 0 else "tab:red" for v in values]
    ax.bar(names, values, color=colors)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.set_ylabel("RL vs greedy (%)")
    ax.set_title("paired policy comparison")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_training_metrics(rows: list[MetricsRow], path) -> None:
    steps = [r.train_steps for r in rows]
    returns = [r.mean_return_1k for r in rows]
    losses = [r.td_loss for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, returns, color="tab:blue", label="mean return (1k window)")
    ax.set_xlabel("training steps")
    ax.set_ylabel("episode return", color="tab:blue")
    ax2 = ax.twinx()
    ax2.plot(steps, losses, color="tab:orange", alpha=0.6, label="TD loss")
    ax2.set_ylabel("TD loss", color="tab:orange")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
