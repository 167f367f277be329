"""
plot_utils.py
----
Plots of training runs.

Main features
----
• plot_training_curves: losses, reward/baseline, policy statistics and val accuracy vs step (SVG).
• plot_mask_gallery: input / APGA mask / Grad-CAM mask rows for a few samples (PNG).
• plot_summary: mean +- std accuracy per augmentation across seeds.

SVG output is byte-stable for unchanged input (fixed hash salt, no date).
"""

from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from apga.harness.metrics_log import read_metrics  # noqa: E402

SVG_METADATA = {"Date": None}


def _save(fig, out_path: Path) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if out_path.suffix.lower() == ".svg":
        with matplotlib.rc_context({"svg.hashsalt": "apga"}):
            fig.savefig(out_path, format="svg", metadata=SVG_METADATA)
    else:
        fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_training_curves(metrics: Union[str, Path, pd.DataFrame], out_path: Union[str, Path], title: str = "") -> Path:
    """
    Four stacked panels sharing the step axis.
    param metrics : metrics.csv path or its DataFrame
    Example :
        plot_training_curves("runs/apga/apga_seed0/metrics.csv", "runs/apga/apga_seed0/curves.svg")
    """
    df = read_metrics(metrics) if not isinstance(metrics, pd.DataFrame) else metrics
    if len(df) == 0:
        raise ValueError(f"no metrics rows to plot in {metrics if not isinstance(metrics, pd.DataFrame) else 'frame'}")
    step = df["step"].to_numpy()
    # markers keep a single-row log visible
    style = dict(marker="o", markersize=2, linewidth=1.2)

    fig, axes = plt.subplots(4, 1, figsize=(8, 10), sharex=True)
    panels = [
        ("loss", [("L_original", "L_original"), ("L_adversarial", "L_adversarial")]),
        ("reward", [("R_t", "R_t"), ("b_t", "b_t (EMA)")]),
        ("policy", [("mean_policy_prob", "mean p"), ("aid_keep_fraction", "aid keep fraction")]),
    ]
    for ax, (ylabel, cols) in zip(axes, panels):
        for col, label in cols:
            values = df[col].to_numpy(dtype=float)
            if np.isfinite(values).any():
                ax.plot(step, values, label=label, **style)
        ax.set_ylabel(ylabel)
        ax.grid(True, alpha=0.3)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(loc="best", fontsize=8)

    acc = df[["step", "val_accuracy"]].dropna()
    axes[3].plot(acc["step"], acc["val_accuracy"], color="tab:green", **dict(style, markersize=4))
    axes[3].set_ylabel("val accuracy")
    axes[3].set_xlabel("step")
    axes[3].grid(True, alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_mask_gallery(
    images: np.ndarray,
    apga_masks: np.ndarray,
    gradcam_masks: Optional[np.ndarray],
    out_path: Union[str, Path],
    ids: Optional[Sequence[str]] = None,
) -> Path:
    """Rows: input images, APGA aiding masks, Grad-CAM masks (omitted when None). Columns: samples."""
    rows = [("input", images, "gray"), ("APGA", apga_masks, "gray")]
    if gradcam_masks is not None:
        rows.append(("GradCam", gradcam_masks, "gray"))
    n = len(images)
    fig, axes = plt.subplots(len(rows), n, figsize=(1.6 * n, 1.7 * len(rows)), squeeze=False)
    for r, (label, stack, cmap) in enumerate(rows):
        for c in range(n):
            ax = axes[r][c]
            ax.imshow(np.squeeze(stack[c]), cmap=cmap, vmin=0.0, vmax=1.0, interpolation="nearest")
            ax.set_xticks([])
            ax.set_yticks([])
            if c == 0:
                ax.set_ylabel(label)
            if r == 0 and ids is not None:
                ax.set_title(str(ids[c]), fontsize=7)
    fig.tight_layout()
    return _save(fig, out_path)


def plot_summary(summary: Dict, out_path: Union[str, Path]) -> Path:
    """Bar chart of mean accuracy (error bar = std over seeds) per augmentation."""
    augs = list(summary["augmentations"])
    means = [summary["augmentations"][a]["mean_accuracy"] for a in augs]
    stds = [summary["augmentations"][a]["std_accuracy"] for a in augs]
    fig, ax = plt.subplots(figsize=(1.5 + 1.2 * len(augs), 4))
    ax.bar(augs, means, yerr=stds, capsize=4, color="tab:blue", alpha=0.8)
    ax.set_ylabel("val accuracy")
    ax.set_ylim(0.0, 1.0)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, out_path)
