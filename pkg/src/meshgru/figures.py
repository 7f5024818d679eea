"""Matplotlib renderers for the CLI report paths.

Figures are written next to the CSV/JSON outputs they illustrate.  The
engine modules never import this; numeric outputs stay plottable by any
external tool.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def save_history_figure(history: list[dict], path: str | Path) -> None:
    epochs = [row["epoch"] for row in history]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.semilogy(epochs, [row["train_loss"] for row in history], label="train loss")
    ax.semilogy(epochs, [row["val_loss"] for row in history], label="validation loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.semilogy(epochs, [row["lr"] for row in history], color="gray", ls="--", lw=1, label="lr")
    ax2.set_ylabel("learning rate", color="gray")
    ax.legend(loc="upper right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_force_deflection_figure(
    curve: np.ndarray, path: str | Path, reference: np.ndarray | None = None
) -> None:
    fig, ax = plt.subplots(figsize=(6, 4.5))
    ax.plot(curve[:, 0], curve[:, 1], "o-", label="predicted", ms=4)
    if reference is not None:
        ax.plot(reference[:, 0], reference[:, 1], "k--", label="reference", lw=1)
    ax.set_xlabel("midspan deflection [mm]")
    ax.set_ylabel("RF2 [kN]")
    ax.legend()
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_attenuation_figure(
    original: np.ndarray,
    projected: np.ndarray,
    path: str | Path,
    label: str,
) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2))
    lim = max(original.max(), projected.max()) * 1.05 or 1.0
    axes[0].plot([0, lim], [0, lim], "k--", lw=1)
    axes[0].plot(original, projected, ".", ms=3, alpha=0.5)
    axes[0].set_xlabel(f"original {label}")
    axes[0].set_ylabel(f"projected {label}")
    axes[0].set_title("element values before/after round trip")
    diff = np.abs(projected - original)
    axes[1].hist(diff, bins=50, color="steelblue")
    axes[1].set_yscale("log")
    axes[1].set_xlabel("absolute difference")
    axes[1].set_ylabel("element count")
    axes[1].set_title("projection error distribution")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_ablation_figure(table: dict, path: str | Path) -> None:
    summary = table["summary"]
    labels = ["stress RMSE", "PEEQ RMSE"]
    single = [summary["stress_rmse"]["single_median"], summary["peeq_rmse"]["single_median"]]
    dual = [summary["stress_rmse"]["dual_median"], summary["peeq_rmse"]["dual_median"]]
    fig, axes = plt.subplots(1, 2, figsize=(8, 4.2))
    for i, ax in enumerate(axes):
        ax.bar([0], [single[i]], width=0.6, color="indianred")
        ax.bar([1], [dual[i]], width=0.6, color="seagreen")
        red = summary["stress_rmse" if i == 0 else "peeq_rmse"]["reduction_percent"]
        ax.set_title(f"{labels[i]} (median, {red:.1f}% reduction)")
        ax.set_xticks([0, 1], ["single", "dual"])
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def save_metrics_figure(metrics_json: dict, path: str | Path) -> None:
    names = list(metrics_json.keys())
    rmse = [metrics_json[n]["rmse_norm"] for n in names]
    r2 = [metrics_json[n]["r2"] for n in names]
    fig, axes = plt.subplots(1, 2, figsize=(9, 4))
    axes[0].bar(names, rmse, color="steelblue")
    axes[0].set_ylabel("normalized RMSE")
    axes[1].bar(names, r2, color="seagreen")
    axes[1].set_ylabel("R^2")
    axes[1].set_ylim(min(0.0, min(r2)), 1.0)
    for ax in axes:
        ax.grid(alpha=0.3, axis="y")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
