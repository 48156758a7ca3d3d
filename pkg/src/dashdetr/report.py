"""Figures for a training run: loss curve, mAP curve, class histogram, detections.

Everything renders with the non-interactive Agg backend straight to PNG.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .data import CLASS_NAMES  # noqa: E402

CLASS_COLOURS = ("#222222", "#d62728", "#1f77b4", "#ff7f0e")


def loss_curve(steps: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [r["step"] for r in steps]
    for key, style in (("total", "-"), ("class", "--"), ("l1", ":"), ("giou", "-.")):
        ax.plot(x, [r[key] for r in steps], style, label=key, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("Training loss")
    ax.legend()
    return _save(fig, path)


def map_curve(epochs: Sequence[dict], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    x = [r["epoch"] for r in epochs]
    for key in ("mAP", "mAP50", "mAR_100d"):
        ax.plot(x, [r[key] for r in epochs], marker="o", markersize=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation score")
    ax.set_ylim(0, 1)
    ax.set_title("Validation mAP")
    ax.legend()
    return _save(fig, path)


def class_histogram_figure(counts: Sequence[int], path, names: Sequence[str] = CLASS_NAMES) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(counts)), counts, color=CLASS_COLOURS[:len(counts)])
    ax.set_xticks(range(len(counts)), names)
    ax.set_ylabel("objects")
    ax.set_title("Class distribution")
    return _save(fig, path)


def detections_figure(image: np.ndarray, detections, ground_truth, path) -> Path:
    """Input on the left, detections on the right; boxes are pixel ``xyxy``.

    ``detections`` holds ``(xyxy, class_id, score)`` triples and
    ``ground_truth`` holds ``(xyxy, class_id)`` pairs.
    """
    fig, (left, right) = plt.subplots(1, 2, figsize=(8, 4))
    rgb = np.asarray(image).transpose(1, 2, 0)
    for ax, title in ((left, "input"), (right, "detections")):
        ax.imshow(rgb, interpolation="nearest")
        ax.set_title(title)
        ax.axis("off")
    for (x1, y1, x2, y2), c in ground_truth:
        left.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, linestyle="--",
                                 edgecolor="white", linewidth=1))
    for (x1, y1, x2, y2), c, score in detections:
        colour = CLASS_COLOURS[c % len(CLASS_COLOURS)]
        right.add_patch(Rectangle((x1, y1), x2 - x1, y2 - y1, fill=False, edgecolor=colour, linewidth=1.5))
        right.text(x1, y1, f"{CLASS_NAMES[c] if c < len(CLASS_NAMES) else c} {score:.2f}",
                   fontsize=6, color="white", backgroundcolor=colour, va="bottom")
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path
