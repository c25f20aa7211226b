"""Report figures rendered to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ..evaluation import EvalRecord, match_detections, pr_curve  # noqa: E402


def loss_curve(history: Sequence[dict], path, window: int = 50) -> Path:
    from .train import smoothed

    steps = [h["iter"] for h in history]
    loss = [h["loss"] for h in history]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, loss, lw=0.6, alpha=0.4, label="loss")
    ax.plot(steps, smoothed(loss, window), lw=1.5, label=f"trailing mean ({window})")
    ax.set_xlabel("iteration")
    ax.set_ylabel("multibox loss")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def pr_curves(records: List[EvalRecord], class_names: Dict[int, str], path, iou_threshold: float = 0.5) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for c, name in class_names.items():
        tp, fp, _, n_gt = match_detections(records, c, iou_threshold)
        if n_gt == 0 or tp.size == 0:
            continue
        recall, precision = pr_curve(tp, fp, n_gt)
        ax.plot(recall, precision, label=name)
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def ablation_bars(rows: Sequence[dict], path, keys=("mAP", "small_mAP", "large_mAP")) -> Path:
    names = [r["cell"] for r in rows]
    x = np.arange(len(rows))
    width = 0.8 / len(keys)
    fig, ax = plt.subplots(figsize=(max(6, 0.9 * len(rows) + 2), 4))
    for i, key in enumerate(keys):
        vals = [r.get(key) if r.get(key) is not None else np.nan for r in rows]
        ax.bar(x + (i - (len(keys) - 1) / 2) * width, vals, width, label=key)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("AP")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
