"""Report figures rendered next to the JSON/JSONL outputs.

All figures go through one savefig helper with pinned metadata so that
identical inputs produce byte-identical image files.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .waypoint import Waypoint  # noqa: E402
from .world import SemanticGrid  # noqa: E402


def _save(fig, path: str) -> None:
    fig.savefig(path, dpi=110, metadata={"Software": "dualnav"})
    plt.close(fig)


def heatmap_figure(path: str, panels: list[tuple[str, np.ndarray]],
                   waypoints: list[list[Waypoint]] | None = None) -> None:
    """Side-by-side polar-bin heatmaps (angle on x, distance on y)."""
    n = len(panels)
    fig, axes = plt.subplots(n, 1, figsize=(8, 1.8 * n), squeeze=False)
    for i, (title, hm) in enumerate(panels):
        ax = axes[i, 0]
        ax.imshow(hm.T, origin="lower", aspect="auto", cmap="viridis",
                  extent=[0, 360, 0.125, 3.125], vmin=0.0, vmax=1.0)
        if waypoints and waypoints[i]:
            xs = [w.heading for w in waypoints[i]]
            ys = [w.distance for w in waypoints[i]]
            ax.scatter(xs, ys, marker="x", c="red", s=30)
        ax.set_title(title, fontsize=9)
        ax.set_ylabel("dist (m)")
    axes[-1, 0].set_xlabel("relative heading (deg)")
    fig.tight_layout()
    _save(fig, path)


def _draw_grid(ax, grid: SemanticGrid) -> None:
    ids = sorted(grid.legend)
    lut = {cid: i for i, cid in enumerate(ids)}
    img = np.vectorize(lut.get)(grid.cells)
    ax.imshow(img, origin="lower", cmap="tab20", interpolation="nearest",
              extent=[0, grid.width * grid.cell_size, 0, grid.height * grid.cell_size])


def trajectory_figure(path: str, grid: SemanticGrid,
                      runs: list[tuple[str, np.ndarray, np.ndarray, tuple[float, float]]],
                      d_th: float = 3.0) -> None:
    """One panel per episode: semantic map, reference path, executed path."""
    n = len(runs)
    cols = min(3, n)
    rows = (n + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(4 * cols, 4 * rows), squeeze=False)
    for i, (title, ref, executed, goal) in enumerate(runs):
        ax = axes[i // cols, i % cols]
        _draw_grid(ax, grid)
        ref = np.asarray(ref).reshape(-1, 2)
        ex = np.asarray(executed).reshape(-1, 2)
        ax.plot(ref[:, 0], ref[:, 1], "w--", lw=1.5, label="reference")
        ax.plot(ex[:, 0], ex[:, 1], "r-", lw=1.2, label="executed")
        ax.add_patch(plt.Circle(goal, d_th, fill=False, ec="lime", lw=1.0))
        ax.plot([goal[0]], [goal[1]], "g*", ms=10)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
    for j in range(n, rows * cols):
        axes[j // cols, j % cols].axis("off")
    if n:
        axes[0, 0].legend(fontsize=7, loc="lower right")
    fig.tight_layout()
    _save(fig, path)


def summary_figure(path: str, summaries: list[dict]) -> None:
    """Grouped bars of SR/SPL/nDTW per evaluation mode."""
    metrics = ["SR", "SPL", "nDTW"]
    modes = [s["mode"] for s in summaries]
    x = np.arange(len(metrics))
    width = 0.8 / max(1, len(modes))
    fig, ax = plt.subplots(figsize=(5, 3))
    for i, s in enumerate(summaries):
        vals = [s[m] for m in metrics]
        ax.bar(x + i * width, vals, width, label=f"{s['mode']} (n={s['n_episodes']})")
    ax.set_xticks(x + width * (len(modes) - 1) / 2)
    ax.set_xticklabels(metrics)
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def training_curve_figure(path: str, log: list[dict]) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    epochs = [e["epoch"] for e in log]
    ax.plot(epochs, [e["high_loss"] for e in log], label="selection loss")
    ax.plot(epochs, [e["low_loss"] for e in log], label="token loss")
    ax2 = ax.twinx()
    ax2.plot(epochs, [e["teacher_acc"] for e in log], "g--", label="teacher acc")
    ax2.set_ylim(0, 1.05)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax2.set_ylabel("accuracy")
    ax.legend(fontsize=8, loc="upper right")
    fig.tight_layout()
    _save(fig, path)


def loss_curve_figure(path: str, losses: list[float], title: str) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(range(len(losses)), losses)
    ax.set_xlabel("epoch")
    ax.set_ylabel("MSE")
    ax.set_title(title, fontsize=9)
    fig.tight_layout()
    _save(fig, path)

