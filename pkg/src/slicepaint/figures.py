"""Figure rendering for evaluation reports.

Rendered alongside the CSV so a run leaves an at-a-glance record: a summary
chart of per-case metrics and a slice montage comparing prediction against
ground truth inside the mask.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsReport
from .volumes import Volume


def save_metrics_figure(report: MetricsReport, path: str) -> None:
    """Per-case bars for each metric with the mean +/- std band."""
    metrics = ("ssim", "psnr", "mse")
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    ids = [c.case_id for c in report.cases]
    xs = np.arange(len(ids))
    for ax, metric in zip(axes, metrics):
        vals = [getattr(c, metric) for c in report.cases]
        mean, std = report.aggregate(metric)
        ax.bar(xs, vals, color="#4878cf")
        ax.axhline(mean, color="#d65f5f", lw=1.2, label=f"mean {mean:.4f}")
        ax.axhspan(mean - std, mean + std, color="#d65f5f", alpha=0.15)
        ax.set_title(metric.upper())
        ax.set_xticks(xs)
        ax.set_xticklabels(ids, rotation=90, fontsize=6)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_case_montage(entries: list[tuple[str, Volume, Volume, Volume]], path: str,
                      max_cases: int = 8) -> None:
    """One row per case: ground truth, prediction, masked |difference|.

    The displayed axial slice is the one with the largest mask area.
    """
    entries = entries[:max_cases]
    rows = len(entries)
    if rows == 0:
        return
    fig, axes = plt.subplots(rows, 3, figsize=(7.5, 2.5 * rows), squeeze=False)
    for r, (case_id, pred, gt, mask) in enumerate(entries):
        areas = mask.data.reshape(mask.dims[0], -1).sum(axis=1)
        i = int(np.argmax(areas))
        panels = (
            ("ground truth", gt.data[i], "gray"),
            ("prediction", pred.data[i], "gray"),
            ("|diff| in mask", np.abs(pred.data[i] - gt.data[i]) * mask.data[i], "magma"),
        )
        for c, (title, img, cmap) in enumerate(panels):
            ax = axes[r][c]
            ax.imshow(img, cmap=cmap, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if r == 0:
                ax.set_title(title, fontsize=9)
            if c == 0:
                ax.set_ylabel(f"{case_id}\nslice {i}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
