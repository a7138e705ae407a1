"""Report figures written next to the CSV outputs of a run."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

RC = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}

# png metadata without a timestamp keeps reruns byte-stable
_PNG_META = {"Software": None}


def _finite(values):
    return [v for v in values if not (isinstance(v, float) and math.isnan(v))]


def plot_history(history, path, title=None):
    """Loss terms, validation precision/recall/F1, learning rate and mean gate value per epoch."""
    rows = history.rows
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, 3, figsize=(10, 3))
        ax = axes[0]
        for key, style in (("L_Total", "-"), ("L_g", "--"), ("L_it", ":"), ("L_t", "-.")):
            vals = [r[key] for r in rows]
            if any(v != 0 for v in vals):
                ax.plot(epochs, vals, style, label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend(frameon=False)

        ax = axes[1]
        for key in ("val_precision", "val_recall", "val_f1"):
            vals = [r[key] for r in rows]
            if _finite(vals):
                ax.plot(epochs, vals, label=key.replace("val_", ""))
        ax.set_ylim(0, 1.02)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation")
        if ax.get_lines():
            ax.legend(frameon=False)
        else:
            ax.text(0.5, 0.5, "no validation split", ha="center", transform=ax.transAxes)

        ax = axes[2]
        ax.semilogy(epochs, [r["lr"] for r in rows], color="0.3", label="lr")
        ax.set_xlabel("epoch")
        ax.set_ylabel("learning rate")
        alphas = [r["mean_alpha"] for r in rows]
        if _finite(alphas):
            twin = ax.twinx()
            twin.plot(epochs, alphas, color="tab:red", label="mean alpha")
            twin.set_ylim(0, 1)
            twin.set_ylabel("mean alpha", color="tab:red")
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)


def plot_score_distribution(scores, labels, mask, path, threshold=0.5, outliers=None):
    """Histogram of per-slot scores split by label (and outlier flag when given)."""
    scores = np.asarray(scores)
    mask = np.asarray(mask, dtype=bool)
    labels = np.asarray(labels).astype(bool)
    bins = np.linspace(0, 1, 26)
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3))
        groups = [("important", mask & labels), ("unimportant", mask & ~labels)]
        if outliers is not None:
            out = np.asarray(outliers, dtype=bool) & mask
            groups = [("important", mask & labels), ("unimportant", mask & ~labels & ~out),
                      ("outlier", out)]
        for name, sel in groups:
            if sel.any():
                ax.hist(scores[sel], bins=bins, histtype="step", label=f"{name} ({int(sel.sum())})")
        ax.axvline(threshold, color="0.5", linestyle="--", linewidth=0.8)
        ax.set_xlabel("score")
        ax.set_ylabel("slots")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(path, metadata=_PNG_META)
        plt.close(fig)
