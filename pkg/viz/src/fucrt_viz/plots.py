"""Render embedding scatters and metric curves to image files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .frames import EmbeddingFrame, load_embedding_csv, load_rounds_jsonl
from .project import project


def _check_output(path, force: bool) -> Path:
    path = Path(path)
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")
    return path


def plot_embeddings(
    csv_path,
    out_path,
    projection: str = "pca",
    color_by: str = "original",
    highlight: tuple[int, ...] = (),
    seed: int = 0,
    force: bool = False,
) -> np.ndarray:
    """Scatter the 2-D projection of an embedding CSV; returns the 2-D points.

    One color per label; highlighted classes are drawn last with a distinct
    marker so they stay visible inside merged clusters.
    """
    frame: EmbeddingFrame = load_embedding_csv(csv_path)
    out = _check_output(out_path, force)
    points = project(frame.vectors, projection, seed)
    labels = frame.labels(color_by)

    fig, ax = plt.subplots(figsize=(7, 6))
    cmap = plt.get_cmap("tab10")
    classes = sorted(int(c) for c in np.unique(labels))
    ordered = [c for c in classes if c not in highlight] + [c for c in classes if c in highlight]
    for c in ordered:
        mask = labels == c
        marker = "^" if c in highlight else "o"
        size = 34 if c in highlight else 16
        ax.scatter(
            points[mask, 0],
            points[mask, 1],
            s=size,
            marker=marker,
            color=cmap(c % 10),
            label=f"class {c}" + (" *" if c in highlight else ""),
            alpha=0.8,
            linewidths=0,
        )
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    ax.set_title(f"{projection.upper()} projection ({color_by} labels)")
    ax.legend(loc="best", fontsize=8, ncols=2)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return points


def plot_rounds(
    jsonl_paths,
    out_path,
    metric: str = "remaining_acc",
    force: bool = False,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """One metric curve per run file, labeled by the run directory name."""
    out = _check_output(out_path, force)
    series = {}
    for path in jsonl_paths:
        path = Path(path)
        label = path.parent.name or path.stem
        series[label] = load_rounds_jsonl(path, metric)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for label, (rounds, values) in series.items():
        ax.plot(rounds, values, marker="o", markersize=3, label=label)
    ax.set_xlabel("round")
    ax.set_ylabel(metric)
    ax.set_title(f"{metric} over training rounds")
    ax.grid(True, alpha=0.3)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return series


def centroid_distance(points: np.ndarray, labels: np.ndarray, a: int, b: int) -> float:
    """Distance between two class centroids in the projected plane."""
    ca = points[labels == a].mean(axis=0)
    cb = points[labels == b].mean(axis=0)
    return float(np.linalg.norm(ca - cb))


def centroid_shrink(pre_csv, post_csv, unlearned: int, target: int) -> tuple[float, float]:
    """(pre, post) centroid distances between the unlearned class and its
    transformation class, measured in one shared PCA plane.

    Distances from two independently fitted projections are not
    scale-comparable, so the plane is fit on the union of both frames.
    """
    from .frames import load_embedding_csv
    from .project import pca_2d

    pre = load_embedding_csv(pre_csv)
    post = load_embedding_csv(post_csv)
    union = np.vstack([pre.vectors, post.vectors])
    points = pca_2d(union)
    n = len(pre.vectors)
    d_pre = centroid_distance(points[:n], pre.original_labels, unlearned, target)
    d_post = centroid_distance(points[n:], post.original_labels, unlearned, target)
    return d_pre, d_post


def dip_then_recover(values: np.ndarray, dip_fraction: float = 0.25, tolerance: float = 2.0) -> bool:
    """True when the curve bottoms out early and ends near its start.

    The first occurrence of the minimum must lie within ``dip_fraction`` of
    the series and the final value must be at least ``start - tolerance``.
    """
    values = np.asarray(values, dtype=np.float64)
    min_at = int(np.argmin(values))
    return min_at <= dip_fraction * (len(values) - 1) and values[-1] >= values[0] - tolerance
