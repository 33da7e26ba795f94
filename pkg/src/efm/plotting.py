"""Static figures for the CLI report path (SVG by default, any matplotlib format works)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib as mpl  # noqa: E402
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GT_COLOR = "tab:red"
PRED_COLOR = "tab:blue"
TRAJ_COLOR = "gold"

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "legend.fontsize": 9,
    "legend.frameon": False,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
    # Stable element ids so identical inputs give identical SVG bytes.
    "svg.hashsalt": "efm",
    "svg.fonttype": "none",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Date": None} if str(path).endswith(".svg") else None)
    plt.close(fig)


def scatter_samples(path, predicted, ground_truth=None, trajectories=None, title="", max_traj=64):
    """Predicted points (blue), ground truth (red), trajectories (yellow).

    ``trajectories`` is ``(steps + 1, n, d)``; only the first two data
    dimensions are drawn.
    """
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 5))
        if trajectories is not None:
            tr = np.asarray(trajectories)[:, :max_traj, :2]
            for j in range(tr.shape[1]):
                ax.plot(tr[:, j, 0], tr[:, j, 1], color=TRAJ_COLOR, lw=0.6, alpha=0.7, zorder=1)
        if ground_truth is not None:
            gt = np.asarray(ground_truth)
            ax.scatter(gt[:, 0], gt[:, 1], s=4, color=GT_COLOR, alpha=0.5, label="ground truth", zorder=2)
        pred = np.asarray(predicted)
        ax.scatter(pred[:, 0], pred[:, 1], s=4, color=PRED_COLOR, alpha=0.7, label="predicted", zorder=3)
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_xlabel("$x_1$")
        ax.set_ylabel("$x_2$")
        if title:
            ax.set_title(title)
        ax.legend(loc="best", markerscale=3)
        _save(fig, path)


def loss_curve(path, trace, window=100):
    it = np.array([i for i, _ in trace], dtype=float)
    loss = np.array([v for _, v in trace], dtype=float)
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.plot(it, loss, color="0.75", lw=0.5)
        if len(loss) >= window:
            smooth = np.convolve(loss, np.ones(window) / window, mode="valid")
            ax.plot(it[window - 1 :], smooth, color=PRED_COLOR, lw=1.2)
        ax.set_yscale("log")
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        _save(fig, path)


def w1_bars(path, report):
    labels = ["(" + ", ".join(f"{v:g}" for v in e["condition"]) + ")" for e in report]
    vals = [e["W1"] for e in report]
    colors = [PRED_COLOR if e.get("group") == "corner" else GT_COLOR for e in report]
    with mpl.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(vals) + 1), 3.5))
        ax.bar(range(len(vals)), vals, color=colors)
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, rotation=45, ha="right")
        ax.set_ylabel("$W_1$ (predicted vs ground truth)")
        _save(fig, path)
