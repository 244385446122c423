"""Static figures for evaluation and feature runs (PNG, Agg backend)."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_pr_curves(curves: Mapping, path, seen: Mapping[str, bool] | None = None) -> Path:
    """One PR curve per domain; unseen domains are drawn dashed."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    for name, c in curves.items():
        style = "--" if seen is not None and not seen.get(name, True) else "-"
        ax.step(c.recall, c.precision, style, where="post", label=name)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.legend(loc="lower left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_bootstrap(samples: Mapping[str, list], path) -> Path:
    """Box plot of bootstrap F1 per domain."""
    plt = _pyplot()
    names = list(samples)
    fig, ax = plt.subplots(figsize=(1.2 * max(3, len(names)) + 1, 4))
    ax.boxplot([np.asarray(samples[n], dtype=float) for n in names], showfliers=False)
    ax.set_xticks(range(1, len(names) + 1), names, rotation=30, fontsize=8)
    ax.set_ylabel("F1 (bootstrap)")
    ax.set_ylim(0, 1.02)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_feature_scatter(projection: np.ndarray, path, names: Mapping[int, str] | None = None) -> Path:
    """Scatter of a 2-D projection (columns x, y, domain_id) coloured by domain."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 4.5))
    dom = projection[:, 2].astype(int)
    for d in np.unique(dom):
        sel = dom == d
        label = names.get(int(d), str(d)) if names else str(d)
        ax.scatter(projection[sel, 0], projection[sel, 1], s=6, alpha=0.6, label=label)
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(fontsize=8, markerscale=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)
