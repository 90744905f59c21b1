"""Static report figures, written next to the CSV they summarise."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata keeps repeated runs byte-identical
_PNG_META = {"Software": None}


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def loss_curves(fold_epochs: list[list[dict]], path: Path) -> Path:
    """Per-epoch L_reg, L_rel and L_total averaged over folds, with the fold range shaded."""
    fig, ax = plt.subplots(figsize=(6, 4))
    if fold_epochs and fold_epochs[0]:
        n = min(len(f) for f in fold_epochs)
        x = np.arange(n)
        for key, label in (("l_reg", "regression"), ("l_rel", "relational"), ("l_total", "total")):
            vals = np.array([[e[key] for e in f[:n]] for f in fold_epochs])
            line, = ax.plot(x, vals.mean(axis=0), label=label)
            ax.fill_between(x, vals.min(axis=0), vals.max(axis=0), color=line.get_color(), alpha=0.15)
        ax.legend()
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    return _save(fig, path)


def prediction_scatter(pred: np.ndarray, target: np.ndarray, names: list[str], path: Path) -> Path:
    k = len(names)
    fig, axes = plt.subplots(1, k, figsize=(3.2 * k, 3.2), squeeze=False)
    for j, (ax, name) in enumerate(zip(axes[0], names)):
        ax.scatter(target[:, j], pred[:, j], s=12)
        lo = float(min(target[:, j].min(), pred[:, j].min()))
        hi = float(max(target[:, j].max(), pred[:, j].max()))
        ax.plot([lo, hi], [lo, hi], color="grey", lw=0.8, ls="--")
        ax.set_title(name)
        ax.set_xlabel("target")
        ax.set_ylabel("prediction")
    return _save(fig, path)


def ablation_bars(rows: list[dict], path: Path) -> Path:
    """Mean CCC and alignment score per variant."""
    names = [r["variant"] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(x - 0.2, [r["mean_CCC"] for r in rows], width=0.4, label="CCC (pooled)")
    ax.bar(x + 0.2, [r["alignment_score"] for r in rows], width=0.4, label="alignment")
    ax.set_xticks(x, names, rotation=15)
    ax.axhline(0.0, color="black", lw=0.6)
    ax.legend()
    return _save(fig, path)
