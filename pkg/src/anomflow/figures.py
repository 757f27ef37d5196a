"""Matplotlib figures written next to the delimited outputs.

Everything renders through the Agg backend at fixed size/dpi with the
Software metadata stripped, so repeated runs produce identical PNG bytes.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .evalkit import ScoredSet

_SAVE = dict(dpi=110, metadata={"Software": None})


def plot_loss_curve(epoch_nll: list[float], path) -> None:
    """Per-epoch mean training nll."""
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = np.arange(1, len(epoch_nll) + 1)
    ax.plot(epochs, epoch_nll, marker="o", ms=3, color="tab:blue")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean train nll")
    ax.set_title("training loss")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_roc_curve(s: ScoredSet, path) -> None:
    """Empirical ROC of anomaly scores (higher score = anomalous)."""
    neg, pos = s.split()
    thresholds = np.unique(np.concatenate([neg, pos]))[::-1]
    tpr = [0.0] + [(pos >= t).mean() for t in thresholds] + [1.0]
    fpr = [0.0] + [(neg >= t).mean() for t in thresholds] + [1.0]
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    ax.plot(fpr, tpr, color="tab:red")
    ax.plot([0, 1], [0, 1], ls="--", lw=0.8, color="gray")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title("ROC")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)


def plot_score_hist(s: ScoredSet, path, bins: int = 30) -> None:
    """Score distributions of flawless vs anomalous samples."""
    neg, pos = s.split()
    lo = float(min(neg.min(), pos.min()))
    hi = float(max(neg.max(), pos.max()))
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.hist(neg, bins=edges, alpha=0.6, label="flawless", color="tab:blue")
    ax.hist(pos, bins=edges, alpha=0.6, label="anomalous", color="tab:red")
    ax.set_xlabel("anomaly score")
    ax.set_ylabel("count")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, **_SAVE)
    plt.close(fig)
