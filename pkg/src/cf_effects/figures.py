"""Matplotlib renderings of the delimited reports.

Each function draws one figure from already-computed report data and writes
it next to the corresponding CSV.  Rendering is headless (Agg) and never
feeds numbers back into the library; the CSV stays the quantitative record.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport, SweepPoint
from .train import FitResult

__all__ = [
    "plot_training_curves",
    "plot_answer_distribution",
    "plot_sweep",
    "plot_compare_grid",
]


def plot_training_curves(result: FitResult, path: str | Path) -> None:
    """Loss terms and validation accuracy traces over epochs."""
    epochs = np.arange(len(result.epoch_reports))
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    for label, values in [
        ("fused", [r.l_vqa for r in result.epoch_reports]),
        ("question-only", [r.l_qa for r in result.epoch_reports]),
        ("vision-only", [r.l_va for r in result.epoch_reports]),
        ("sharpness", [r.l_kl for r in result.epoch_reports]),
    ]:
        ax_loss.plot(epochs, values, label=label)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("mean batch loss")
    ax_loss.legend(fontsize=8)
    ax_acc.plot(epochs, result.val_acc_posterior, label="posterior")
    ax_acc.plot(epochs, result.val_acc_tie, label="TIE")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val accuracy")
    ax_acc.set_ylim(0, 1)
    ax_acc.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_answer_distribution(
    report: EvalReport, mode: str, path: str | Path
) -> None:
    """Predicted vs ground-truth answer counts, one panel per question type."""
    T, A = report.num_qtypes, report.num_answers
    predicted = report.predicted_hist[mode]
    fig, axes = plt.subplots(1, T, figsize=(3.2 * T, 3.2), sharey=True)
    axes = np.atleast_1d(axes)
    x = np.arange(A)
    for t, ax in enumerate(axes):
        ax.bar(x - 0.2, report.truth_hist[t], width=0.4, label="truth")
        ax.bar(x + 0.2, predicted[t], width=0.4, label="predicted")
        ax.set_title(f"qtype {t}", fontsize=9)
        ax.set_xlabel("answer")
    axes[0].set_ylabel("count")
    axes[0].legend(fontsize=8)
    fig.suptitle(f"answer distribution ({mode})", fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_sweep(points: list[SweepPoint], path: str | Path) -> None:
    """TIE accuracy and ranking agreements across forced constants."""
    cs = [p.c for p in points]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(cs, [p.tie_accuracy for p in points], marker="o", label="TIE accuracy")
    ax.plot(cs, [p.tau_tie_vs_fused for p in points], marker="s",
            label="tau(TIE, fused)")
    ax.plot(cs, [p.tau_tie_vs_nde for p in points], marker="^",
            label="tau(TIE, direct effect)")
    ax.set_xlabel("forced counterfactual constant")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_compare_grid(
    rows: list[dict], path: str | Path, value_keys: tuple[str, ...] = ("posterior", "nie", "tie")
) -> None:
    """Grouped bars: one group per fusion strategy, one bar per inference mode."""
    strategies = [r["strategy"] for r in rows]
    x = np.arange(len(strategies))
    width = 0.8 / len(value_keys)
    fig, ax = plt.subplots(figsize=(7, 4))
    for i, key in enumerate(value_keys):
        ax.bar(x + (i - (len(value_keys) - 1) / 2) * width,
               [r[key] for r in rows], width=width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(strategies)
    ax.set_ylabel("OOD test accuracy")
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
