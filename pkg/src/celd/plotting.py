"""Matplotlib renderers for evaluation reports.  Figures go straight to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

PANEL_TITLES = {
    "NONE": "No perturbation",
    "RG": "Reduce green (RG)",
    "RGR": "Random green removal (RGR)",
    "RC": "Reduced contrast (RC)",
    "GN": "Gaussian noise (GN)",
    "ES": "Edge sharpening (ES)",
    "ODC": "Optic disc occlusion (ODC)",
}

plt.rcParams.update({"font.size": 9, "axes.titlesize": 10, "savefig.dpi": 120})


def _draw_confusion(ax, report, letter=None):
    cm = report.confusion
    counts = cm.counts
    names = list(cm.labelspace.classes)
    ax.imshow(counts, cmap="Blues", vmin=0, vmax=max(1, counts.max()))
    thresh = counts.max() / 2 if counts.size else 0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            ax.text(j, i, str(counts[i, j]), ha="center", va="center",
                    color="white" if counts[i, j] > thresh else "black")
    ax.set_xticks(range(len(names)), names, rotation=30, ha="right")
    ax.set_yticks(range(len(names)), names)
    ax.set_xlabel("Predicted")
    ax.set_ylabel("True")
    title = PANEL_TITLES.get(report.perturbation.kind, report.perturbation.kind)
    if letter:
        title = f"({letter}) {title}"
    ax.set_title(title)


def save_confusion_panel(report, path) -> Path:
    fig, ax = plt.subplots(figsize=(3.6, 3.4))
    _draw_confusion(ax, report)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def save_confusion_grid(reports, path, ncols=4) -> Path:
    n = len(reports)
    ncols = min(ncols, n)
    nrows = int(np.ceil(n / ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(3.4 * ncols, 3.3 * nrows), squeeze=False)
    for k, ax in enumerate(axes.flat):
        if k < n:
            _draw_confusion(ax, reports[k], letter="abcdefghijklmnopqrstuvwxyz"[k % 26])
        else:
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def save_metric_bars(reports, path) -> Path:
    """Grouped bars of precision, recall and F1 per class, one group per perturbation."""
    classes = list(reports[0].confusion.labelspace.classes)
    metrics = ("precision", "recall", "f1")
    labels = [r.perturbation.label() for r in reports]
    x = np.arange(len(reports))
    width = 0.8 / len(classes)
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4), sharey=True)
    for m, ax in enumerate(axes):
        for c, name in enumerate(classes):
            vals = [r.per_class.get(name, (0.0, 0.0, 0.0))[m] for r in reports]
            ax.bar(x + (c - (len(classes) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x, labels, rotation=45, ha="right")
        ax.set_title(metrics[m].capitalize() if m < 2 else "F1-score")
        ax.set_ylim(0, 1.05)
    axes[0].legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
