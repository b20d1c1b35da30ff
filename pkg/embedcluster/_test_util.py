import itertools
import math
import os
import re
import subprocess
import tempfile

import numpy as np

from embedcluster.numcore import GradientTape
from embedcluster.numcore import backward
from embedcluster.numcore import scalar

__all__ = [
    "accuracy_bruteforce",
    "ari_pairs",
    "cat",
    "grad_check",
    "instance_loss_bruteforce",
    "make_tempdir",
    "min_assignment_bruteforce",
    "nearest_labels",
    "nmi_direct",
    "np",
    "os",
    "raises",
    "re",
    "run",
    "same_partition",
]


def run(cmd: str):
    p = subprocess.run(
        cmd,
        shell=True,
        stderr=subprocess.STDOUT,
        stdout=subprocess.PIPE,
        env={**os.environ, "PYTHONPATH": _embedcluster_home()},
    )
    print(p.stdout.decode())
    print(f"<{p.returncode}>")


def _embedcluster_home():
    return os.path.dirname(os.path.dirname(__file__))


def make_tempdir():
    return tempfile.mkdtemp(prefix="embedcluster-test-")


def cat(path: str):
    with open(path) as f:
        print(f.read().rstrip())


# =============================================================
# Gradient check
# =============================================================


def grad_check(fn, tensors, step=1e-5, atol=1e-7):
    """Returns the max relative error of tape gradients against central
    finite differences.

    `fn(tape)` must return a scalar loss. When `tape` is None, fn must
    compute the same loss from the current values of `tensors`, which
    are perturbed in place. Relative error is `|g - g_fd| / (|g_fd| +
    1e-8)`. Entries that differ by no more than `atol` count as exact.
    """
    tape = GradientTape()
    grads = backward(tape, fn(tape))
    worst = 0.0
    for name, t in tensors.items():
        analytic = grads[name]
        for idx in np.ndindex(t.shape):
            saved = t[idx]
            t[idx] = saved + step
            f_plus = scalar(fn(None))
            t[idx] = saved - step
            f_minus = scalar(fn(None))
            t[idx] = saved
            numeric = (f_plus - f_minus) / (2 * step)
            diff = abs(analytic[idx] - numeric)
            if diff <= atol:
                continue
            worst = max(worst, float(diff / (abs(numeric) + 1e-8)))
    return worst


# =============================================================
# Brute force oracles
# =============================================================


def ari_pairs(pred, truth):
    """ARI by enumerating every sample pair."""
    n = len(pred)
    both = pred_only = truth_only = neither = 0
    for i, j in itertools.combinations(range(n), 2):
        same_pred = pred[i] == pred[j]
        same_truth = truth[i] == truth[j]
        if same_pred and same_truth:
            both += 1
        elif same_pred:
            pred_only += 1
        elif same_truth:
            truth_only += 1
        else:
            neither += 1
    num = 2.0 * (both * neither - pred_only * truth_only)
    den = (both + truth_only) * (truth_only + neither) + (both + pred_only) * (
        pred_only + neither
    )
    return 1.0 if den == 0 else num / den


def accuracy_bruteforce(pred, truth):
    """Accuracy by trying every cluster-to-class permutation."""
    _, pred = np.unique(pred, return_inverse=True)
    _, truth = np.unique(truth, return_inverse=True)
    k = max(pred.max(), truth.max()) + 1
    best = 0
    for perm in itertools.permutations(range(k)):
        matched = sum(1 for p, t in zip(pred, truth) if perm[p] == t)
        best = max(best, matched)
    return best / len(pred)


def nmi_direct(pred, truth):
    """NMI from contingency counts, normalized by mean entropy."""
    n = len(pred)
    pred_ids = sorted(set(pred))
    truth_ids = sorted(set(truth))
    counts = {
        (a, b): sum(1 for p, t in zip(pred, truth) if p == a and t == b)
        for a in pred_ids
        for b in truth_ids
    }
    rows = {a: sum(1 for p in pred if p == a) for a in pred_ids}
    cols = {b: sum(1 for t in truth if t == b) for b in truth_ids}
    h_pred = -sum(c / n * math.log(c / n) for c in rows.values())
    h_truth = -sum(c / n * math.log(c / n) for c in cols.values())
    if h_pred == 0 or h_truth == 0:
        return 1.0 if h_pred == h_truth else 0.0
    mi = sum(
        c / n * math.log(n * c / (rows[a] * cols[b]))
        for (a, b), c in counts.items()
        if c > 0
    )
    return mi / ((h_pred + h_truth) / 2)


def instance_loss_bruteforce(z1, z2, tau):
    """Contrastive loss from the full 2N x 2N similarity matrix."""
    z = np.vstack([z1, z2])
    m = len(z)
    n = m // 2
    sim = np.zeros((m, m))
    for i in range(m):
        for j in range(m):
            sim[i, j] = z[i] @ z[j] / (np.linalg.norm(z[i]) * np.linalg.norm(z[j]))
    total = 0.0
    for i in range(m):
        pos = (i + n) % m
        denom = sum(math.exp(sim[i, k] / tau) for k in range(m) if k != i)
        total += -math.log(math.exp(sim[i, pos] / tau) / denom)
    return total / m


def min_assignment_bruteforce(cost):
    cost = np.asarray(cost)
    n = cost.shape[0]
    return min(
        sum(cost[i, perm[i]] for i in range(n))
        for perm in itertools.permutations(range(n))
    )


def nearest_labels(h, centroids):
    return np.array(
        [
            min(range(len(centroids)), key=lambda j: float(np.sum((x - centroids[j]) ** 2)))
            for x in h
        ]
    )


def same_partition(a, b):
    """True if labelings a and b are equal up to relabeling."""
    pairs = set(zip(np.asarray(a).tolist(), np.asarray(b).tolist()))
    return len(pairs) == len(set(a)) == len(set(b))


def raises(f, *args, **kw):
    """Prints the error raised by calling f as `<Name>: <message>`."""
    try:
        f(*args, **kw)
    except Exception as e:
        print(f"{type(e).__name__}: {e}")
    else:
        print("<no error>")
