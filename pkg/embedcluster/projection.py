# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import csv
import logging

import numpy as np
from sklearn.decomposition import PCA

from . import ArgumentError

from .numcore import as_matrix

__all__ = [
    "pca_2d",
    "read_projection",
    "write_projection",
    "write_svg",
]

log = logging.getLogger(__name__)

PROJECTION_HEADER = ("index", "pc1", "pc2", "cluster", "label")


def pca_2d(features: Any) -> np.ndarray:
    """Returns features projected onto their first two principal axes."""
    x = as_matrix(features)
    if len(x) < 2:
        raise ArgumentError(f"PCA requires at least 2 rows (got {len(x)})")
    if x.shape[1] < 2:
        x = np.hstack([x, np.zeros((len(x), 2 - x.shape[1]))])
    return PCA(n_components=2, svd_solver="full").fit_transform(x)


def write_projection(
    path: str,
    coords: np.ndarray,
    clusters: Sequence[int],
    labels: Optional[Sequence[int]] = None,
):
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(PROJECTION_HEADER)
        for i, (xy, c) in enumerate(zip(coords, clusters)):
            label = "" if labels is None else int(labels[i])
            out.writerow([i, repr(float(xy[0])), repr(float(xy[1])), int(c), label])
    log.debug("wrote %i projected rows to %s", len(coords), path)


def read_projection(path: str):
    """Returns (coords, clusters, labels) from a projection CSV.

    labels is None when the CSV has no labels.
    """
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    coords = np.array([[float(row["pc1"]), float(row["pc2"])] for row in rows])
    clusters = np.array([int(row["cluster"]) for row in rows], dtype=np.int64)
    labels = (
        np.array([int(row["label"]) for row in rows], dtype=np.int64)
        if rows and rows[0]["label"] != ""
        else None
    )
    return coords.reshape(len(rows), 2), clusters, labels


def write_svg(path: str, coords: np.ndarray, clusters: Sequence[int]):
    try:
        import matplotlib
    except ImportError:
        raise ArgumentError(
            "SVG output requires matplotlib (install embedcluster[plot])"
        ) from None
    matplotlib.use("Agg")
    from matplotlib import pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 6))
    ax.scatter(coords[:, 0], coords[:, 1], c=np.asarray(clusters), s=8, cmap="tab10")
    ax.set_xlabel("pc1")
    ax.set_ylabel("pc2")
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
