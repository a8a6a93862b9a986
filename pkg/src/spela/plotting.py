"""Matplotlib figures written next to the CSV outputs of the CLI."""

from __future__ import annotations

from collections import defaultdict

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import RunMetrics  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_training_curves(metrics: RunMetrics, path, title: str = "") -> None:
    """Accuracy and loss against epoch, one line per (layer, split)."""
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(10, 4))
    series = defaultdict(list)
    for r in metrics.records:
        series[(r["layer"], r["split"])].append((r["epoch"], r["accuracy"], r["loss"]))
    for (layer, split), pts in sorted(series.items()):
        pts.sort()
        ep = [p[0] for p in pts]
        style = "-" if split == "test" else "--"
        ax_acc.plot(ep, [100 * p[1] for p in pts], style, label=f"layer {layer} {split}")
        ax_loss.plot(ep, [p[2] for p in pts], style, label=f"layer {layer} {split}")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy (%)")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_acc.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    _save(fig, path)


def plot_relative_memory(rows: list, path) -> None:
    """Relative peak stored activations against depth, per algorithm and batch size."""
    fig, ax = plt.subplots(figsize=(6, 4))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["algorithm"], r["batch_size"])].append((r["depth"], r["relative_peak_memory"]))
    for (alg, bs), pts in sorted(groups.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], "o-" if alg == "spela" else "s--",
                label=f"{alg} B={bs}")
    ax.set_xlabel("hidden layers")
    ax.set_ylabel("relative peak stored activations")
    ax.legend(fontsize=8)
    _save(fig, path)


def plot_sweep(summary: list, path, param: str) -> None:
    """Mean test accuracy with a one-std band for each layer across sweep points."""
    fig, ax = plt.subplots(figsize=(6, 4))
    by_layer = defaultdict(list)
    labels = []
    for r in summary:
        if r["label"] not in labels:
            labels.append(r["label"])
        by_layer[r["layer"]].append((labels.index(r["label"]), r["mean"], r["std"]))
    for layer, pts in sorted(by_layer.items()):
        pts.sort()
        x = [p[0] for p in pts]
        m = [100 * p[1] for p in pts]
        s = [100 * p[2] for p in pts]
        ax.plot(x, m, "o-", label=f"layer {layer}")
        ax.fill_between(x, [a - b for a, b in zip(m, s)], [a + b for a, b in zip(m, s)], alpha=0.2)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_xlabel(param)
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=8)
    _save(fig, path)
