"""Figure rendering for analysis reports; PNG files next to the CSV/JSON
tables (the tables stay the machine contract)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def fig_loss_profile(profiles: dict[str, np.ndarray], path, title: str = "per-position loss") -> None:
    fig, ax = plt.subplots(figsize=(7, 4))
    for label, losses in profiles.items():
        ax.plot(np.arange(len(losses)), losses, marker="o", label=label)
    ax.set_xlabel("position (subtask)")
    ax.set_ylabel("flow loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_zero_shot(report, path) -> None:
    losses = np.asarray(report.per_position_loss)
    colors = ["tab:blue" if p in set(report.trained_positions) else "tab:orange"
              for p in range(len(losses))]
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.bar(np.arange(len(losses)), losses, color=colors)
    ax.set_xlabel("position (blue=trained, orange=held-out)")
    ax.set_ylabel("flow loss")
    ax.set_title(f"{report.variant}: transfer ratio r = {report.transfer_ratio:.3f}")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_flops(report, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    variants = list(report.pairs)
    ax.bar(variants, [report.pairs[v] for v in variants])
    for i, v in enumerate(variants):
        ax.text(i, report.pairs[v], f"{report.ratio_vs_full[v]:.3f}x", ha="center", va="bottom")
    ax.set_ylabel(f"query-key pairs (n={report.n}, w={report.w})")
    ax.set_title("attention cost accounting")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_transfer_grid(grid: np.ndarray, rows: list[int], path) -> None:
    fig, ax = plt.subplots(figsize=(7, 5))
    vmax = np.nanmax(np.abs(grid)) or 1.0
    im = ax.imshow(grid, cmap="RdBu", vmin=-vmax, vmax=vmax, aspect="auto")
    ax.set_yticks(range(len(rows)), [f"trained@{r}" for r in rows])
    ax.set_xlabel("evaluated position")
    ax.set_title("relative improvement vs early multi-task baseline (%)")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_stationarity(z_mean: np.ndarray, z_std: np.ndarray, train_len: int, path) -> None:
    fig, ax = plt.subplots(figsize=(8, 4))
    ax.plot(z_mean, label="z of channel-mean")
    ax.plot(z_std, label="z of channel-std")
    ax.axvline(train_len - 0.5, color="k", linestyle="--", label="train length")
    for y in (-3, 3):
        ax.axhline(y, color="r", linestyle=":")
    ax.set_xlabel("position")
    ax.set_ylabel("z-score vs steady-state band")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def fig_image_grid(images: np.ndarray, path, cols: int = 4) -> None:
    """(N, H, W, 3) images in [-1, 1] laid out in a grid."""
    n = len(images)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(2.2 * cols, 2.2 * rows))
    axes = np.atleast_1d(axes).reshape(rows, cols)
    for i in range(rows * cols):
        ax = axes[i // cols, i % cols]
        ax.axis("off")
        if i < n:
            ax.imshow(((images[i] + 1.0) / 2.0).clip(0, 1))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
