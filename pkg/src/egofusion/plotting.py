"""Matplotlib figures written next to the CSV reports."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps reruns byte-identical
_SAVE_KW = {"dpi": 120, "metadata": {"Software": None}}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)


def confusion_figure(matrix: np.ndarray, labels: Sequence[str], path: str | Path, title: str = "") -> None:
    n = len(labels)
    size = max(4.0, 0.35 * n + 2.0)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(matrix, cmap="Blues", vmin=0.0, vmax=1.0)
    ax.set_xticks(range(n))
    ax.set_yticks(range(n))
    ax.set_xticklabels(labels, rotation=90, fontsize=7)
    ax.set_yticklabels(labels, fontsize=7)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    _save(fig, path)


def accuracy_difference_figure(delta, labels: Sequence[str], path: str | Path, title: str = "") -> None:
    items = sorted(delta.items(), key=lambda cd: cd[1], reverse=True)
    fig, ax = plt.subplots(figsize=(max(4.0, 0.3 * len(items) + 2.0), 3.5))
    if items:
        cls, vals = zip(*items)
        colors = ["tab:green" if v >= 0 else "tab:red" for v in vals]
        ax.bar(range(len(vals)), vals, color=colors)
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels([labels[c] for c in cls], rotation=90, fontsize=7)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_ylabel("accuracy difference")
    if title:
        ax.set_title(title)
    _save(fig, path)


def history_figure(histories: Mapping[str, str | Path], path: str | Path) -> None:
    fig, (ax_loss, ax_acc) = plt.subplots(1, 2, figsize=(8, 3.2))
    for name, hist in histories.items():
        with open(hist, newline="") as fh:
            rows = list(csv.DictReader(fh))
        ep = [int(r["epoch"]) for r in rows]
        ax_loss.plot(ep, [float(r["train_loss"]) for r in rows], label=name)
        ax_acc.plot(ep, [float(r["val_top1"]) for r in rows], label=name)
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("val top-1")
    ax_acc.legend(fontsize=7)
    _save(fig, path)
