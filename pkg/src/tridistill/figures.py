"""Figure rendering for run reports; every function writes a PNG.

Uses the Agg backend so rendering works headless; figures are closed
after saving to keep long sweeps from hoarding memory.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .metrics import CalibrationReport  # noqa: E402
from .trainer import MetricsRecord  # noqa: E402


def _save(fig, path: str) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def training_curves(records: list[MetricsRecord], path: str, title: str = "") -> None:
    """Loss totals and accuracies against epochs, one panel each."""
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [r.epoch for r in records]
    ax_loss.plot(epochs, [r.total_student for r in records], label="student total")
    ax_loss.plot(epochs, [r.total_teacher for r in records], label="teacher total")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.set_title("loss")
    if records:
        ax_loss.legend()
    ax_acc.plot(epochs, [r.test_acc_student for r in records], label="student test")
    ax_acc.plot(epochs, [r.test_acc_teacher for r in records], label="teacher test")
    ax_acc.plot(epochs, [r.train_acc_student for r in records],
                label="student train", linestyle="--", alpha=0.6)
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy")
    ax_acc.set_title("accuracy")
    if records:
        ax_acc.legend()
    if title:
        fig.suptitle(title)
    _save(fig, path)


def curriculum_curve(generations: list[int], accuracies: list[float], path: str) -> None:
    """Final student test accuracy across curriculum generations."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(generations, accuracies, marker="o")
    ax.set_xlabel("generation")
    ax.set_ylabel("student test accuracy")
    ax.set_title("curriculum")
    if generations:
        ax.set_xticks(generations)
    _save(fig, path)


def reliability_diagram(report: CalibrationReport, path: str, title: str = "") -> None:
    """Per-bin accuracy against confidence with the ideal diagonal."""
    fig, ax = plt.subplots(figsize=(5, 5))
    width = 1.0 / report.bin_count
    centers = [(b + 0.5) * width for b in range(report.bin_count)]
    heights = [s.accuracy if s.count else 0.0 for s in report.bins]
    ax.bar(centers, heights, width=width * 0.9, label="accuracy")
    ax.plot([0, 1], [0, 1], color="gray", linestyle="--", label="ideal")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title or f"reliability (ece={report.ece:.4f})")
    ax.legend()
    _save(fig, path)


def labeled_bars(labels: list[str], values: list[float], path: str,
                 ylabel: str, title: str = "") -> None:
    """One bar per run for any scalar diagnostic."""
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), values)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    _save(fig, path)


def grouped_bars(labels: list[str], series: dict[str, list[float]], path: str,
                 ylabel: str, title: str = "") -> None:
    """Side-by-side bars per run, one group of bars per series key."""
    fig, ax = plt.subplots(figsize=(max(4, 1.5 * len(labels)), 4))
    n = max(1, len(series))
    width = 0.8 / n
    for i, (name, values) in enumerate(series.items()):
        xs = [j + (i - (n - 1) / 2) * width for j in range(len(labels))]
        ax.bar(xs, values, width=width, label=name)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.legend()
    _save(fig, path)
