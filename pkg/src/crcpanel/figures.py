"""Figure rendering for the report paths.

Every CLI command that writes delimited output can also render the matching
matplotlib figure next to it.  Rendering is headless (Agg) and deterministic:
PNG output carries no timestamps, so identical runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["g_band_figure", "mu_hist_figure", "sweep_figure", "cv_figure", "mu_tilde_figure"]

plt.rcParams.update({"figure.dpi": 120, "axes.grid": True, "grid.alpha": 0.3})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def g_band_figure(band, path) -> Path:
    """Correction band over the grid: truth, pointwise mean, 5/95% quantiles."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.fill_between(band["v1"], band["q5"], band["q95"], alpha=0.25, label="5-95% band")
    ax.plot(band["v1"], band["mean_ghat"], label="mean fitted")
    ax.plot(band["v1"], band["true_g"], "r--", label="truth")
    ax.set_xlabel("first control coordinate")
    ax.set_ylabel("correction, first component")
    ax.legend()
    return _save(fig, path)


def mu_hist_figure(draws: dict, truth, component: int, path) -> Path:
    """Histogram of replication draws per estimator for one coefficient."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, arr in draws.items():
        vals = arr[:, component]
        vals = vals[~np.isnan(vals)]
        if vals.size:
            ax.hist(vals, bins=30, alpha=0.5, density=True, label=name)
    if truth is not None:
        ax.axvline(truth[component], color="k", linestyle="--", label="truth")
    ax.set_xlabel(f"coefficient {component + 1}")
    ax.set_ylabel("density")
    ax.legend()
    return _save(fig, path)


def sweep_figure(points, lambda_min, floor, path) -> Path:
    """Minimum eigenvalue along the sweep, with the invertibility floor."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(np.arange(len(lambda_min)), lambda_min, marker=".", linestyle="-")
    ax.axhline(floor, color="r", linestyle="--", label=f"floor {floor:g}")
    ax.set_xlabel("grid point")
    ax.set_ylabel("smallest eigenvalue")
    ax.set_yscale("log")
    ax.legend()
    return _save(fig, path)


def cv_figure(labels, scores, winner: int, path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    colors = ["tab:orange" if i == winner else "tab:blue" for i in range(len(labels))]
    ax.bar(range(len(labels)), scores, color=colors)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel("leave-one-out CV score")
    return _save(fig, path)


def mu_tilde_figure(mu_tilde: np.ndarray, mu_hat: np.ndarray, path) -> Path:
    """Per-unit pseudo-coefficient distribution with the mean marked."""
    d = mu_tilde.shape[1]
    fig, axes = plt.subplots(1, d, figsize=(4 * d, 3.5), squeeze=False)
    for j in range(d):
        ax = axes[0, j]
        ax.hist(mu_tilde[:, j], bins=40, alpha=0.7, density=True)
        ax.axvline(mu_hat[j], color="k", linestyle="--")
        ax.set_xlabel(f"per-unit coefficient {j + 1}")
    return _save(fig, path)
