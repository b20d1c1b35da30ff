# SPDX-License-Identifier: Apache-2.0

from __future__ import annotations

from typing import *

import numpy as np

from . import ArgumentError
from . import ShapeError

from .numcore import Operand
from .numcore import add
from .numcore import concat_rows
from .numcore import div
from .numcore import log as ln
from .numcore import mean
from .numcore import mul
from .numcore import pairwise_cosine
from .numcore import row_logsumexp
from .numcore import sub
from .numcore import sum_rows
from .numcore import take
from .numcore import value

__all__ = [
    "ANCHOR_VARIANTS",
    "LossWeights",
    "anchor_inputs",
    "anchor_loss",
    "cluster_loss",
    "instance_loss",
    "kl_rows",
    "total_loss",
]

KL_ANCHOR = "kl-anchor"

JSD = "jsd"

KL_TARGET = "kl-target"

CROSS_KL = "cross-kl"

ANCHOR_VARIANTS = (KL_ANCHOR, JSD, KL_TARGET, CROSS_KL)

_ANCHOR_INPUTS = {
    KL_ANCHOR: ("q0", "q1", "q2"),
    JSD: ("q1", "q2"),
    KL_TARGET: ("p0", "q1", "q2"),
    CROSS_KL: ("p1", "p2", "q1", "q2"),
}


class LossWeights:
    def __init__(self, alpha: float = 20.0, beta: float = 0.1, gamma: float = 0.1):
        weights = (float(alpha), float(beta), float(gamma))
        if any(w < 0 or not np.isfinite(w) for w in weights):
            raise ArgumentError(f"loss weights must be non-negative (got {weights})")
        if not any(w > 0 for w in weights):
            raise ArgumentError("at least one loss weight must be positive")
        self.alpha, self.beta, self.gamma = weights

    def __iter__(self):
        return iter((self.alpha, self.beta, self.gamma))

    def __repr__(self):
        return f"<LossWeights {self.alpha:g} {self.beta:g} {self.gamma:g}>"


def anchor_inputs(variant: str) -> Tuple[str, ...]:
    try:
        return _ANCHOR_INPUTS[variant]
    except KeyError:
        raise ArgumentError(
            f"unknown anchor variant '{variant}' "
            f"(expected one of {', '.join(ANCHOR_VARIANTS)})"
        ) from None


# =============================================================
# Instance loss
# =============================================================


def instance_loss(z1: Operand, z2: Operand, tau: float = 0.5):
    """Returns the temperature-scaled contrastive loss for paired views.

    Each of the 2N rows of `z1` and `z2` is contrasted against its
    partner view (positive) and the 2N - 2 rows from other samples
    (negatives). Self-similarity is excluded from the denominator.
    """
    if tau <= 0:
        raise ArgumentError(f"temperature must be positive (got {tau})")
    s1, s2 = value(z1).shape, value(z2).shape
    if len(s1) != 2 or s1 != s2 or s1[0] == 0:
        raise ShapeError(f"views must have matching non-empty shapes (got {s1}, {s2})")
    n = s1[0]
    logits = div(pairwise_cosine(concat_rows(z1, z2)), tau)
    rows = np.arange(2 * n)
    partner = (rows + n) % (2 * n)
    positives = take(logits, (rows * 2 * n + partner)[:, None])
    lse = row_logsumexp(logits, ~np.eye(2 * n, dtype=bool))
    return mean(sub(lse, positives))


# =============================================================
# KL losses
# =============================================================


def kl_rows(p: Operand, q: Operand):
    """Returns KL[p_i || q_i] for each row as an N x 1 matrix.

    Zero entries of `p` contribute zero.
    """
    pv, qv = value(p), value(q)
    if pv.ndim != 2 or pv.shape != qv.shape:
        raise ShapeError(f"distribution shapes differ: {pv.shape} and {qv.shape}")
    return sum_rows(mul(p, sub(ln(p), ln(q))))


def cluster_loss(p: Operand, q: Operand):
    # p is a constant target
    return mean(kl_rows(value(p), q))


def anchor_loss(
    variant: str,
    q0: Optional[Operand] = None,
    q1: Optional[Operand] = None,
    q2: Optional[Operand] = None,
    p0: Optional[Operand] = None,
    p1: Optional[Operand] = None,
    p2: Optional[Operand] = None,
    detach_anchor: bool = False,
):
    """Returns the anchor agreement loss for `variant`.

    Only the inputs a variant reads need to be given. Targets `p0`,
    `p1` and `p2` never carry gradient. When `detach_anchor` is true,
    `q0` is treated as a constant as well.
    """
    supplied = {"q0": q0, "q1": q1, "q2": q2, "p0": p0, "p1": p1, "p2": p2}
    missing = [name for name in anchor_inputs(variant) if supplied[name] is None]
    if missing:
        raise ArgumentError(f"anchor variant {variant} requires {', '.join(missing)}")
    if variant == KL_ANCHOR:
        anchor = value(q0) if detach_anchor else q0
        return mean(add(kl_rows(anchor, q1), kl_rows(anchor, q2)))
    if variant == JSD:
        return mean(_jsd_rows(q1, q2))
    if variant == KL_TARGET:
        target = value(p0)
        return mean(add(kl_rows(target, q1), kl_rows(target, q2)))
    assert variant == CROSS_KL, variant
    return mean(add(kl_rows(value(p1), q2), kl_rows(value(p2), q1)))


def _jsd_rows(a: Operand, b: Operand):
    m = mul(add(a, b), 0.5)
    return mul(add(kl_rows(a, m), kl_rows(b, m)), 0.5)


# =============================================================
# Total
# =============================================================


def total_loss(
    weights: LossWeights,
    l_inst: Operand,
    l_clus: Operand = 0.0,
    l_anch: Operand = 0.0,
):
    alpha, beta, gamma = weights
    return add(add(mul(l_inst, alpha), mul(l_clus, beta)), mul(l_anch, gamma))
