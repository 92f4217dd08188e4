"""Figure rendering for run reports. All figures go straight to files."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402


def _save(fig, path) -> str:
    os.makedirs(os.path.dirname(str(path)) or ".", exist_ok=True)
    fig.savefig(path, dpi=120, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def plot_training_curve(history: list[dict], path) -> str:
    steps = [r["step"] for r in history if "elbo" in r]
    elbo = [r["elbo"] for r in history if "elbo" in r]
    kl = [r["kl"] for r in history if "elbo" in r]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, elbo, label="evidence bound")
    ax.set_xlabel("step")
    ax.set_ylabel("evidence bound")
    ax2 = ax.twinx()
    ax2.plot(steps, kl, color="tab:orange", alpha=0.7, label="KL")
    ax2.set_ylabel("KL to prior")
    ax.legend(loc="lower right")
    ax.set_title("training")
    return _save(fig, path)


def plot_regression_band(x_train, y_train, x_grid, mean, var, vh, path) -> str:
    """1D fit with a two-sigma band; distributional part shaded separately."""
    xg = np.asarray(x_grid).ravel()
    order = np.argsort(xg)
    xg = xg[order]
    mu = np.asarray(mean).ravel()[order]
    sd = np.sqrt(np.asarray(var).ravel()[order])
    sd_h = np.sqrt(np.asarray(vh).ravel()[order])
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.fill_between(xg, mu - 2 * sd, mu + 2 * sd, alpha=0.25,
                    color="tab:blue", label="total (2 sd)")
    ax.fill_between(xg, mu - 2 * sd_h, mu + 2 * sd_h, alpha=0.35,
                    color="tab:red", label="distributional (2 sd)")
    ax.plot(xg, mu, color="tab:blue")
    ax.scatter(np.asarray(x_train).ravel(), np.asarray(y_train).ravel(),
               s=12, color="k", zorder=3, label="train")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    ax.legend(loc="best")
    ax.set_title("predictive law")
    return _save(fig, path)


def plot_rotation_entropy(records: list[dict], path) -> str:
    angles = [r["angle"] for r in records]
    fig, ax = plt.subplots(figsize=(6, 4))
    if all("mean_entropy" in r for r in records):
        ax.plot(angles, [r["mean_entropy"] for r in records], marker="o",
                label="predictive entropy")
    ax.plot(angles, [r["mean_vh"] for r in records], marker="s",
            color="tab:red", label="distributional variance")
    ax.set_xlabel("rotation (degrees)")
    ax.set_ylabel("mean score")
    ax.legend(loc="best")
    ax.set_title("rotation sweep")
    return _save(fig, path)


def plot_score_histograms(in_scores, out_scores, threshold, path) -> str:
    fig, ax = plt.subplots(figsize=(6, 4))
    bins = np.histogram_bin_edges(
        np.concatenate([np.ravel(in_scores), np.ravel(out_scores)]), bins=40)
    ax.hist(np.ravel(in_scores), bins=bins, alpha=0.6, label="in-distribution")
    ax.hist(np.ravel(out_scores), bins=bins, alpha=0.6, label="out")
    ax.axvline(threshold, color="k", linestyle="--", label="threshold")
    ax.set_xlabel("score")
    ax.set_ylabel("count")
    ax.legend(loc="best")
    ax.set_title("score separation")
    return _save(fig, path)


def plot_layer_bounds(rows: list[dict], path) -> str:
    names = [r["layer"] for r in rows]
    bounds = [r["bound"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(5, 1.2 * len(names)), 4))
    ax.bar(range(len(names)), bounds, color="tab:purple")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("Lipschitz constant")
    ax.set_title("per-layer bounds")
    return _save(fig, path)
