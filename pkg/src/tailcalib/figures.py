"""Matplotlib renderings of the report outputs (PNG next to the CSV/JSON)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

# Keep PNGs byte-stable across reruns: no Software/date metadata.
_SAVE_KW = {"dpi": 150, "metadata": {"Software": None}}


def save_projection_figure(projected: np.ndarray, labels: np.ndarray,
                           is_generated: np.ndarray, path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, 5))
    cmap = plt.get_cmap("tab20")
    for k in np.unique(labels):
        color = cmap(int(k) % 20)
        real = (labels == k) & ~is_generated
        fake = (labels == k) & is_generated
        if real.any():
            ax.scatter(projected[real, 0], projected[real, 1], s=12,
                       color=color, label=f"class {k}")
        if fake.any():
            ax.scatter(projected[fake, 0], projected[fake, 1], s=12,
                       color=color, alpha=0.35, marker="x")
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if len(np.unique(labels)) <= 12:
        ax.legend(fontsize=8, loc="best")
    ax.set_title("2-d projection (x markers are generated rows)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_accuracy_figure(per_class: np.ndarray, train_counts: np.ndarray,
                         groups: tuple[str, ...], path: str | Path) -> None:
    order = np.argsort(train_counts)[::-1]
    colors = {"many": "#2b6cb0", "mid": "#718096", "few": "#c05621"}
    fig, ax = plt.subplots(figsize=(max(6, 0.25 * len(order)), 4))
    ax.bar(range(len(order)), per_class[order],
           color=[colors[groups[c]] for c in order])
    ax.set_xticks(range(len(order)))
    ax.set_xticklabels([str(c) for c in order], fontsize=7)
    ax.set_xlabel("class (by descending train count)")
    ax.set_ylabel("validation accuracy")
    ax.set_ylim(0, 1)
    handles = [plt.Rectangle((0, 0), 1, 1, color=colors[g]) for g in ("many", "mid", "few")]
    ax.legend(handles, ["many", "mid", "few"], fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_training_curves(records: list[dict], path: str | Path) -> None:
    epochs = [r["epoch"] for r in records]
    losses = [r["train_loss"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, losses, color="#2b6cb0", label="train loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("train loss")
    if any("val_accuracy" in r for r in records):
        ax2 = ax.twinx()
        ax2.plot(epochs, [r.get("val_accuracy") for r in records],
                 color="#c05621", label="val accuracy")
        ax2.set_ylabel("validation accuracy")
        ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def save_neighbor_figure(report: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(figsize=(6, max(3, 0.4 * len(report))))
    names, values = [], []
    for row in report:
        top = row["top_neighbors"][:2]
        for neighbor, count in top:
            names.append(f"{row['class_id']} <- {neighbor}")
            values.append(count)
    y = np.arange(len(names))
    ax.barh(y, values, color="#2b6cb0")
    ax.set_yticks(y)
    ax.set_yticklabels(names, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlabel("times selected as neighbor")
    ax.set_title("top calibration neighbors per tail class")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
