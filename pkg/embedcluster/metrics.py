# SPDX-License-Identifier: Apache-2.0

"""Clustering scores against ground-truth labels.

All scores are invariant to relabeling of either partition. NMI
normalizes mutual information by the arithmetic mean of the two
entropies.
"""

from __future__ import annotations

from typing import *

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn import metrics as sk_metrics
from sklearn.metrics.cluster import contingency_matrix

from . import ArgumentError

__all__ = [
    "ContingencyTable",
    "accuracy",
    "ari",
    "nmi",
    "optimal_assignment",
    "score_all",
]


class ContingencyTable:
    """Co-occurrence counts of predicted clusters (rows) and classes (cols)."""

    def __init__(self, pred: Any, truth: Any):
        pred, truth = _check_labels(pred, truth)
        self.counts = np.asarray(contingency_matrix(pred, truth), dtype=np.int64)
        self.n = len(pred)

    @property
    def row_sums(self):
        return self.counts.sum(axis=1)

    @property
    def col_sums(self):
        return self.counts.sum(axis=0)

    def __repr__(self):
        return f"<ContingencyTable {self.counts.shape[0]}x{self.counts.shape[1]} n={self.n}>"


def _check_labels(pred: Any, truth: Any, min_len: int = 1):
    pred = np.asarray(pred).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if len(pred) != len(truth):
        raise ArgumentError(
            f"label lengths differ: {len(pred)} predicted, {len(truth)} true"
        )
    if len(pred) < min_len:
        raise ArgumentError(
            f"at least {min_len} label(s) required (got {len(pred)})"
        )
    return pred, truth


def nmi(pred: Any, truth: Any) -> float:
    pred, truth = _check_labels(pred, truth)
    return float(
        sk_metrics.normalized_mutual_info_score(
            truth, pred, average_method="arithmetic"
        )
    )


def accuracy(pred: Any, truth: Any) -> float:
    """Returns the best matched fraction over one-to-one cluster-class maps."""
    table = ContingencyTable(pred, truth)
    rows, cols = optimal_assignment(table.counts, maximize=True)
    return float(table.counts[rows, cols].sum() / table.n)


def ari(pred: Any, truth: Any) -> float:
    pred, truth = _check_labels(pred, truth, min_len=2)
    return float(sk_metrics.adjusted_rand_score(truth, pred))


def optimal_assignment(cost: Any, maximize: bool = False):
    """Returns (rows, cols) of an optimal one-to-one assignment.

    Rectangular matrices behave as if padded with zeros to square.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ArgumentError(f"assignment cost must be a matrix (got {cost.shape})")
    return linear_sum_assignment(cost, maximize=maximize)


def score_all(pred: Any, truth: Any) -> Dict[str, float]:
    return {
        "nmi": nmi(pred, truth),
        "acc": accuracy(pred, truth),
        "ari": ari(pred, truth),
    }
