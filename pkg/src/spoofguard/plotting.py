"""Figures written next to the TSV outputs of ``spoofguard evaluate``."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy.stats import norm  # noqa: E402

# fixed metadata keeps the PNG bytes stable across runs
_PNG_META = {"Software": None}


def report_style():
    plt.rcParams.update({
        "figure.figsize": (6.0, 4.0),
        "figure.dpi": 100,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "axes.spines.top": False,
        "axes.spines.right": False,
        "font.size": 10,
        "legend.frameon": False,
    })


def plot_det(det_points, path, eer_percent=None, label="CM"):
    """DET curve on normal-deviate axes, miss vs false alarm."""
    report_style()
    pts = np.asarray(det_points, dtype=float)
    fig, ax = plt.subplots()
    if pts.size:
        clip = lambda p: np.clip(p, 1e-4, 1 - 1e-4)
        ax.plot(norm.ppf(clip(pts[:, 2])), norm.ppf(clip(pts[:, 1])), lw=1.5, label=label)
    ticks = np.array([0.001, 0.01, 0.05, 0.2, 0.5, 0.8, 0.95])
    ax.set_xticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
    ax.set_yticks(norm.ppf(ticks), [f"{100 * t:g}" for t in ticks])
    ax.plot([-4, 4], [-4, 4], color="0.6", lw=0.8, ls="--")
    ax.set_xlim(norm.ppf(5e-4), norm.ppf(0.99))
    ax.set_ylim(norm.ppf(5e-4), norm.ppf(0.99))
    ax.set_xlabel("False alarm rate (%)")
    ax.set_ylabel("Miss rate (%)")
    if eer_percent is not None:
        ax.set_title(f"DET, EER = {eer_percent:.2f}%")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_per_attack(per_attack, path, pooled=None):
    """Bar chart of per-attack EER (%)."""
    report_style()
    fig, ax = plt.subplots()
    names = list(per_attack)
    ax.bar(names, [per_attack[n] for n in names], color="tab:blue", width=0.6)
    if pooled is not None:
        ax.axhline(pooled, color="tab:red", lw=1, ls="--", label=f"pooled {pooled:.2f}%")
        ax.legend()
    ax.set_xlabel("Attack")
    ax.set_ylabel("EER (%)")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_training(epoch_loss, path):
    report_style()
    fig, ax = plt.subplots()
    ax.plot(np.arange(1, len(epoch_loss) + 1), epoch_loss, marker="o", ms=3)
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Mean training loss")
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
