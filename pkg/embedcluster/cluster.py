# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import logging

import numpy as np
from scipy.spatial import distance
from sklearn.cluster import kmeans_plusplus

from . import ArgumentError
from . import ShapeError

from .numcore import EPS
from .numcore import Operand
from .numcore import Rng
from .numcore import add
from .numcore import as_matrix
from .numcore import derive_seed
from .numcore import div
from .numcore import power
from .numcore import reshape
from .numcore import square
from .numcore import sub
from .numcore import sum_rows
from .numcore import take_rows
from .numcore import value

__all__ = [
    "KMeansResult",
    "compute_target",
    "hard_assign",
    "inter_cluster_distance",
    "kmeans_init",
    "soft_assign",
]

log = logging.getLogger(__name__)

AssignmentMatrix = np.ndarray

Labels = np.ndarray

KMEANS_RESTARTS = 20

KMEANS_MAX_ITERS = 100

KMEANS_TOL = 1e-6


class KMeansResult:
    def __init__(
        self,
        centroids: np.ndarray,
        labels: Labels,
        inertia: float,
        history: List[float],
    ):
        self.centroids = centroids
        self.labels = labels
        self.inertia = inertia
        self.history = history

    def __repr__(self):
        return (
            f"<KMeansResult k={len(self.centroids)} inertia={self.inertia:.6g} "
            f"iters={len(self.history) - 1}>"
        )


# =============================================================
# K-means
# =============================================================


def kmeans_init(
    h: Any,
    k: int,
    rng: Rng,
    max_iters: int = KMEANS_MAX_ITERS,
    restarts: int = KMEANS_RESTARTS,
    tol: float = KMEANS_TOL,
) -> KMeansResult:
    """Returns the best of `restarts` k-means++ seeded Lloyd runs.

    `history` of the result holds the inertia after each assignment
    step of the winning run.
    """
    h = as_matrix(h)
    n = h.shape[0]
    if k < 2:
        raise ArgumentError(f"k-means requires k >= 2 (got {k})")
    if n < k:
        raise ArgumentError(f"k-means requires at least k={k} points (got {n})")
    if restarts < 1 or max_iters < 1:
        raise ArgumentError("k-means requires at least one restart and iteration")
    best: Optional[KMeansResult] = None
    for restart in range(restarts):
        result = _lloyd(h, k, derive_seed(rng), max_iters, tol)
        log.debug(
            "k-means restart %i: inertia %.6g after %i iterations",
            restart,
            result.inertia,
            len(result.history) - 1,
        )
        if best is None or result.inertia < best.inertia:
            best = result
    assert best
    return best


def _lloyd(h: np.ndarray, k: int, seed: int, max_iters: int, tol: float):
    centroids, _ = kmeans_plusplus(h, k, random_state=seed)
    centroids = centroids.astype(np.float64)
    labels, dist = _assign(h, centroids)
    inertia = float(dist.sum())
    history = [inertia]
    for _ in range(max_iters):
        centroids = _update(h, labels, dist, centroids)
        labels, dist = _assign(h, centroids)
        prev, inertia = inertia, float(dist.sum())
        history.append(inertia)
        if prev - inertia <= tol * max(prev, EPS):
            break
    return KMeansResult(centroids, labels, inertia, history)


def _assign(h: np.ndarray, centroids: np.ndarray):
    d2 = distance.cdist(h, centroids, "sqeuclidean")
    labels = d2.argmin(axis=1)
    return labels, d2[np.arange(len(h)), labels]


def _update(
    h: np.ndarray,
    labels: Labels,
    dist: np.ndarray,
    centroids: np.ndarray,
):
    k = len(centroids)
    updated = centroids.copy()
    counts = np.bincount(labels, minlength=k)
    for j in np.flatnonzero(counts):
        updated[j] = h[labels == j].mean(axis=0)
    dist = dist.copy()
    for j in np.flatnonzero(counts == 0):
        # Reseed an empty cluster at the point farthest from its centroid
        far = int(dist.argmax())
        log.debug("k-means cluster %i is empty, reseeding at point %i", j, far)
        updated[j] = h[far]
        dist[far] = -1.0
    return updated


# =============================================================
# Assignments
# =============================================================


def soft_assign(h: Operand, centroids: Operand, nu: float = 1.0):
    """Returns Student-t soft assignments q of embeddings to centroids.

    q_ij is proportional to (1 + |h_i - mu_j|^2 / nu)^(-(nu + 1) / 2)
    and each row sums to 1.
    """
    if nu <= 0:
        raise ArgumentError(f"degrees of freedom must be positive (got {nu})")
    hv, mv = value(h), value(centroids)
    if hv.ndim != 2 or mv.ndim != 2 or hv.shape[1] != mv.shape[1]:
        raise ShapeError(
            f"embeddings {hv.shape} and centroids {mv.shape} differ in width"
        )
    n, k = hv.shape[0], mv.shape[0]
    pairs_h = take_rows(h, np.repeat(np.arange(n), k))
    pairs_mu = take_rows(centroids, np.tile(np.arange(k), n))
    d2 = reshape(sum_rows(square(sub(pairs_h, pairs_mu))), (n, k))
    kernel = power(add(div(d2, nu), 1.0), -(nu + 1.0) / 2.0)
    return div(kernel, sum_rows(kernel))


def compute_target(q: Operand) -> AssignmentMatrix:
    """Returns the auxiliary target distribution p for assignments q.

    Cluster frequencies are summed over the rows of q. The result is a
    constant: nothing is recorded on a tape.
    """
    q = value(q)
    if q.ndim != 2 or q.size == 0:
        raise ShapeError(f"expected a non-empty assignment matrix (got {q.shape})")
    f = np.maximum(q.sum(axis=0, keepdims=True), EPS)
    w = q * q / f
    return w / w.sum(axis=1, keepdims=True)


def hard_assign(q: Operand) -> Labels:
    # argmax picks the lowest index on ties
    return value(q).argmax(axis=1)


def inter_cluster_distance(centroids: Any) -> float:
    c = as_matrix(centroids)
    if len(c) < 2:
        raise ArgumentError(
            f"inter-cluster distance requires at least 2 centroids (got {len(c)})"
        )
    return float(distance.pdist(c, "euclidean").mean())
