"""PNG figures for the CLI's optional ``--plot`` flag.

Rendering uses the non-interactive Agg backend; every function writes one
file and closes its figure.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 110,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "legend.frameon": False,
}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def energy_histograms(energies, path, bins=30):
    """Overlaid energy histograms; ``energies`` maps split name to values."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        values = [np.asarray(v, dtype=float) for v in energies.values()]
        lo = min(v.min() for v in values if v.size)
        hi = max(v.max() for v in values if v.size)
        edges = np.linspace(lo, hi, bins + 1) if hi > lo else bins
        for name, v in zip(energies, values):
            ax.hist(v, bins=edges, alpha=0.55, label=f"{name} (mean {v.mean():.2f})")
        ax.set_xlabel("energy  -log sum exp(logits)")
        ax.set_ylabel("count")
        ax.legend()
        return _save(fig, path)


def confusion_grid(class_names, confusion, path):
    """One 2x2 matrix (rows true, columns predicted) per class."""
    C = len(class_names)
    cols = min(C, 5)
    rows = -(-C // cols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(rows, cols, figsize=(2.1 * cols, 2.1 * rows), squeeze=False)
        for ax in axes.ravel()[C:]:
            ax.axis("off")
        for ax, name, (tp, fp, tn, fn) in zip(axes.ravel(), class_names, confusion):
            m = np.array([[tn, fp], [fn, tp]])
            ax.imshow(m, cmap="Blues")
            for (i, j), v in np.ndenumerate(m):
                ax.text(j, i, str(int(v)), ha="center", va="center", fontsize=8, color="white" if v > m.max() / 2 else "black")
            ax.set_xticks([0, 1], ["neg", "pos"])
            ax.set_yticks([0, 1], ["neg", "pos"])
            ax.set_title(name)
        return _save(fig, path)


def training_curves(log, path):
    """Loss parts and validation metrics against epoch."""
    epochs = [r["epoch"] for r in log]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8.0, 3.0))
        for key in ("loss_total", "loss_bce", "loss_dir"):
            ax1.plot(epochs, [r[key] for r in log], label=key[5:])
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend()
        for key in ("micro_auc", "selective_acc", "unc_recall", "coverage"):
            ax2.plot(epochs, [np.nan if r[key] is None else r[key] for r in log], label=key)
        ax2.set_xlabel("epoch")
        ax2.set_ylim(0, 1.02)
        ax2.legend()
        return _save(fig, path)


def label_distribution(dist, path):
    """Stacked bars of POS / NEG / UNC / BLANK counts per class."""
    names = list(dist)
    counts = np.array([dist[n] for n in names], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4.0, 0.8 * len(names)), 3.0))
        bottom = np.zeros(len(names))
        for j, label in enumerate(("positive", "negative", "uncertain", "blank")):
            ax.bar(names, counts[:, j], bottom=bottom, label=label)
            bottom += counts[:, j]
        ax.set_ylabel("entries")
        ax.tick_params(axis="x", rotation=30)
        ax.legend()
        return _save(fig, path)
