"""Matplotlib figures written next to the JSON/CSV outputs. Every plotted value is also in those files."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import RECALL_POINTS  # noqa: E402


def _save(fig, path) -> None:
    fig.tight_layout()
    # fixed metadata so repeated runs write identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def plot_training_log(rows, path, title: str = "training loss") -> None:
    rows = np.asarray(rows, dtype=float)
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows.size:
        it = rows[:, 0]
        ax.plot(it, rows[:, 2], label="total")
        ax.plot(it, rows[:, 3], label="recall term")
        ax.plot(it, rows[:, 4], label="background term")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.set_yscale("symlog", linthresh=1e-2)
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def plot_pr_curves(report, path, iou_threshold: float = 0.5) -> None:
    """Interpolated precision-recall per class at one IoU threshold."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for (c, thr), (recall, precision) in sorted(report.curves.items()):
        if abs(thr - iou_threshold) > 1e-9 or precision.size == 0:
            continue
        env = np.maximum.accumulate(precision[::-1])[::-1]
        idx = np.searchsorted(recall, RECALL_POINTS, side="left")
        p = np.where(idx < env.size, env[np.minimum(idx, env.size - 1)], 0.0)
        ax.plot(RECALL_POINTS, p, label=f"class {c}")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curves, IoU {iou_threshold:.2f}")
    ax.legend()
    _save(fig, path)


def plot_grouped_ap(groups: dict[str, dict[str, float]], path, title: str, ylabel: str = "AP (%)") -> None:
    """Bar chart: one group per method, one bar per subset (shape or crowd bucket)."""
    methods = list(groups)
    subsets = sorted({s for g in groups.values() for s in g}, key=_bucket_key)
    x = np.arange(len(subsets))
    width = 0.8 / max(1, len(methods))
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, m in enumerate(methods):
        vals = [groups[m].get(s, np.nan) for s in subsets]
        ax.bar(x + i * width - 0.4 + width / 2, vals, width, label=m)
    ax.set_xticks(x)
    ax.set_xticklabels(subsets)
    ax.set_ylabel(ylabel)
    ax.set_title(title)
    ax.legend()
    _save(fig, path)


def _bucket_key(name: str):
    head = name.split("-")[0].rstrip("+")
    return (0, int(head), name) if head.isdigit() else (1, 0, name)


def plot_trace(rows, path, object_index: int = 0, top: int = 5) -> None:
    """Confidence of the bag anchors that end training with the highest confidence."""
    rows = [r for r in rows if r[4] == object_index]
    fig, ax = plt.subplots(figsize=(6, 4))
    if rows:
        arr = np.asarray(rows, dtype=float)
        last = arr[arr[:, 0] == arr[:, 0].max()]
        best = last[np.argsort(-last[:, 5], kind="stable")[:top], 1]
        for j in best:
            sel = arr[arr[:, 1] == j]
            ax.plot(sel[:, 0], sel[:, 5], marker="o", label=f"anchor {int(j)}")
        ax.legend()
    ax.set_xlabel("iteration")
    ax.set_ylabel("P^cls * P^loc")
    ax.set_title(f"object {object_index}: bag-anchor confidence")
    _save(fig, path)
