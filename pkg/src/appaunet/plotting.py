"""Figure rendering for run and report artifacts (PNG files, no display)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "svg.hashsalt": "appaunet",
}

PRED_RGB = (1.0, 0.25, 0.1)
GT_COLOR = "#00d0ff"


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def overlay_figure(image, gt, pred, path, title: str = "", alpha: float = 0.4) -> Path:
    """Image with the predicted mask alpha-blended and the ground-truth contour on top."""
    image = np.asarray(image, dtype=float)
    pred = np.asarray(pred, dtype=float)
    rgba = np.zeros(image.shape + (4,))
    rgba[..., :3] = PRED_RGB
    rgba[..., 3] = alpha * pred
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3, 3))
        ax.imshow(image, cmap="gray", vmin=0, vmax=1, interpolation="nearest")
        ax.imshow(rgba, interpolation="nearest")
        if np.any(gt) and not np.all(gt):
            ax.contour(np.asarray(gt, dtype=float), levels=[0.5], colors=GT_COLOR, linewidths=1.0)
        ax.set_axis_off()
        if title:
            ax.set_title(title)
        return _save(fig, path)


def loss_curves_figure(history: dict, path, title: str = "") -> Path:
    terms = [k for k in history if k != "val_ds" and history[k]]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(len(terms), 1), figsize=(2.6 * max(len(terms), 1), 2.4), squeeze=False)
        for ax, term in zip(axes[0], terms):
            values = history[term]
            ax.plot(np.arange(1, len(values) + 1), values, lw=1.2)
            ax.set_xlabel("epoch")
            ax.set_title(term)
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def report_figure(rows: list, path, metric: str = "ds") -> Path:
    """Grouped bars of one metric: one group per dataset, one bar per model/loss."""
    datasets = sorted({r["dataset"] for r in rows})
    models = sorted({r["model"] for r in rows})
    width = 0.8 / max(len(models), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(max(3.5, 1.2 * len(datasets) * max(len(models), 1) * 0.5), 2.8))
        for k, model in enumerate(models):
            vals = []
            for d in datasets:
                match = [float(r[metric]) for r in rows if r["dataset"] == d and r["model"] == model and r[metric] != ""]
                vals.append(match[0] if match else np.nan)
            ax.bar(np.arange(len(datasets)) + k * width, vals, width, label=model)
        ax.set_xticks(np.arange(len(datasets)) + 0.4 - width / 2)
        ax.set_xticklabels(datasets)
        ax.set_ylabel(metric.upper())
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)
