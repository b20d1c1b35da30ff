# SPDX-License-Identifier: Apache-2.0

"""Dense matrices, seeded randomness and a reverse-mode gradient tape.

Matrices are plain 2-D `float64` NumPy arrays. Operations defined here
accept either arrays or `Var` nodes. When any operand is a `Var`, the
result is recorded on the operand's `GradientTape` and `backward`
can later replay the tape in reverse to compute gradients for every
leaf registered with `GradientTape.leaf`.
"""

from __future__ import annotations

from typing import *

import logging

import numpy as np
from scipy import special

from . import ArgumentError
from . import ContractError
from . import DegenerateVectorError
from . import ShapeError

__all__ = [
    "EPS",
    "DenseMatrix",
    "GradientTape",
    "Operand",
    "Rng",
    "Var",
    "add",
    "as_matrix",
    "backward",
    "clip",
    "concat_rows",
    "cosine_similarity",
    "derive_seed",
    "div",
    "exp",
    "log",
    "log_sum_exp",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "pairwise_cosine",
    "power",
    "relu",
    "reshape",
    "restore_rng",
    "rng_state",
    "row_logsumexp",
    "row_norm",
    "row_softmax",
    "scalar",
    "square",
    "sub",
    "sum_cols",
    "sum_rows",
    "take",
    "take_rows",
    "total",
    "transpose",
    "value",
]

log = logging.getLogger(__name__)

DenseMatrix = np.ndarray

Rng = np.random.Generator

EPS = 1e-12

TRAIN_STREAM = 0
DATA_STREAM = 1
EVAL_STREAM = 2


# =============================================================
# Randomness
# =============================================================


def make_rng(seed: int, stream: int = TRAIN_STREAM) -> Rng:
    """Returns a generator for seed and stream.

    Streams let independent consumers (training, data synthesis,
    evaluation) draw from the same seed without sharing state.
    """
    if seed < 0:
        raise ArgumentError(f"seed must be non-negative (got {seed})")
    return np.random.Generator(np.random.PCG64([seed, stream]))


def rng_state(rng: Rng) -> Dict[str, Any]:
    return cast(Dict[str, Any], rng.bit_generator.state)


def restore_rng(state: Dict[str, Any]) -> Rng:
    bitgen = np.random.PCG64()
    bitgen.state = state
    return np.random.Generator(bitgen)


def derive_seed(rng: Rng) -> int:
    return int(rng.integers(0, 2**31 - 1))


# =============================================================
# Tape
# =============================================================

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Var:
    def __init__(
        self,
        value: np.ndarray,
        tape: GradientTape,
        inputs: Sequence[Any] = (),
        vjp: Optional[VJP] = None,
        name: Optional[str] = None,
    ):
        self.value = value
        self.tape = tape
        self.inputs = inputs
        self.vjp = vjp
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"<Var {self.name or 'node'} shape={self.value.shape}>"


class GradientTape:
    def __init__(self):
        self.nodes: List[Var] = []
        self.leaves: Dict[str, Var] = {}

    def leaf(self, name: str, val: Any) -> Var:
        try:
            return self.leaves[name]
        except KeyError:
            var = Var(_as_float(val), self, name=name)
            self.leaves[name] = var
            return var

    def record(self, val: np.ndarray, inputs: Sequence[Any], vjp: VJP) -> Var:
        var = Var(val, self, inputs, vjp)
        self.nodes.append(var)
        return var

    def __repr__(self):
        return f"<GradientTape nodes={len(self.nodes)} leaves={len(self.leaves)}>"


Operand = Union[Var, np.ndarray, float]


def _as_float(x: Any) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def value(x: Operand) -> np.ndarray:
    return x.value if isinstance(x, Var) else _as_float(x)


def scalar(x: Operand) -> float:
    val = value(x)
    if val.size != 1:
        raise ContractError(f"expected a scalar but got shape {val.shape}")
    return float(val.reshape(-1)[0])


def as_matrix(x: Any) -> DenseMatrix:
    m = _as_float(x)
    if m.ndim == 0:
        return m.reshape(1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix but got shape {m.shape}")
    return m


def _tape_for(inputs: Sequence[Any]) -> Optional[GradientTape]:
    tape = None
    for x in inputs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise ContractError("operands are recorded on different tapes")
    return tape


def _op(val: np.ndarray, inputs: Sequence[Any], vjp: VJP) -> Any:
    tape = _tape_for(inputs)
    if tape is None:
        return val
    return tape.record(val, inputs, vjp)


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(tape: GradientTape, output: Any) -> Dict[str, np.ndarray]:
    """Returns gradients of output for every tape leaf.

    Leaves that `output` does not depend on receive zero gradients.
    """
    if not isinstance(output, Var) or output.tape is not tape:
        raise ContractError("backward output must be recorded on the tape")
    if output.value.size != 1:
        raise ContractError(
            f"backward requires a scalar output (got shape {output.value.shape})"
        )
    grads: Dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None or node.vjp is None:
            continue
        for x, gx in zip(node.inputs, node.vjp(g)):
            if not isinstance(x, Var) or gx is None:
                continue
            gx = _unbroadcast(gx, x.value.shape)
            cur = grads.get(id(x))
            grads[id(x)] = gx if cur is None else cur + gx
    return {
        name: grads.get(id(leaf), np.zeros_like(leaf.value))
        for name, leaf in tape.leaves.items()
    }


# =============================================================
# Primitives
# =============================================================


def matmul(a: Operand, b: Operand):
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"cannot multiply {av.shape} by {bv.shape}")
    return _op(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def _binary_values(a: Operand, b: Operand, opname: str):
    av, bv = value(a), value(b)
    try:
        np.broadcast_shapes(av.shape, bv.shape)
    except ValueError:
        raise ShapeError(f"cannot {opname} {av.shape} and {bv.shape}") from None
    return av, bv


def add(a: Operand, b: Operand):
    av, bv = _binary_values(a, b, "add")
    return _op(av + bv, (a, b), lambda g: (g, g))


def sub(a: Operand, b: Operand):
    av, bv = _binary_values(a, b, "subtract")
    return _op(av - bv, (a, b), lambda g: (g, -g))


def mul(a: Operand, b: Operand):
    av, bv = _binary_values(a, b, "multiply")
    return _op(av * bv, (a, b), lambda g: (g * bv, g * av))


def div(a: Operand, b: Operand):
    av, bv = _binary_values(a, b, "divide")
    out = av / bv
    return _op(out, (a, b), lambda g: (g / bv, -g * out / bv))


def relu(a: Operand):
    av = value(a)
    return _op(np.maximum(av, 0.0), (a,), lambda g: (g * (av > 0),))


def exp(a: Operand):
    out = np.exp(value(a))
    return _op(out, (a,), lambda g: (g * out,))


def log(a: Operand, eps: float = EPS):
    shifted = value(a) + eps
    return _op(np.log(shifted), (a,), lambda g: (g / shifted,))


def square(a: Operand):
    av = value(a)
    return _op(av * av, (a,), lambda g: (2.0 * g * av,))


def power(a: Operand, c: float):
    av = value(a)
    return _op(av**c, (a,), lambda g: (g * c * av ** (c - 1.0),))


def clip(a: Operand, lo: float, hi: float):
    av = value(a)
    inside = (av >= lo) & (av <= hi)
    return _op(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


def sum_rows(a: Operand):
    av = value(a)
    return _op(
        av.sum(axis=1, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, av.shape).copy(),),
    )


def sum_cols(a: Operand):
    av = value(a)
    return _op(
        av.sum(axis=0, keepdims=True),
        (a,),
        lambda g: (np.broadcast_to(g, av.shape).copy(),),
    )


def total(a: Operand):
    av = value(a)
    return _op(
        av.sum().reshape(1, 1),
        (a,),
        lambda g: (np.full(av.shape, g.reshape(-1)[0]),),
    )


def mean(a: Operand):
    av = value(a)
    if av.size == 0:
        raise ShapeError("mean of an empty matrix")
    n = av.size
    return _op(
        (av.sum() / n).reshape(1, 1),
        (a,),
        lambda g: (np.full(av.shape, g.reshape(-1)[0] / n),),
    )


def row_norm(a: Operand):
    av = value(a)
    n = np.sqrt((av * av).sum(axis=1, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return _op(n, (a,), lambda g: (g * av / safe,))


def transpose(a: Operand):
    return _op(value(a).T, (a,), lambda g: (g.T,))


def reshape(a: Operand, shape: Tuple[int, int]):
    av = value(a)
    try:
        out = av.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {av.shape} to {shape}") from None
    return _op(out, (a,), lambda g: (g.reshape(av.shape),))


def concat_rows(*xs: Operand):
    vals = [value(x) for x in xs]
    widths = {v.shape[1] for v in vals}
    if len(widths) != 1:
        raise ShapeError(
            f"cannot stack rows of differing widths {[v.shape for v in vals]}"
        )
    splits = np.cumsum([v.shape[0] for v in vals])[:-1]
    return _op(np.vstack(vals), xs, lambda g: tuple(np.split(g, splits, axis=0)))


def take(a: Operand, index: Any):
    """Gathers entries of `a` by flat (row-major) index.

    The result has the shape of `index`.
    """
    av = value(a)
    index = np.asarray(index, dtype=np.intp)
    out = av.reshape(-1)[index]

    def vjp(g: np.ndarray):
        ga = np.bincount(index.reshape(-1), weights=g.reshape(-1), minlength=av.size)
        return (ga.reshape(av.shape),)

    return _op(out, (a,), vjp)


def take_rows(a: Operand, rows: Any):
    cols = value(a).shape[1]
    rows = np.asarray(rows, dtype=np.intp)
    return take(a, rows[:, None] * cols + np.arange(cols))


def row_softmax(a: Operand):
    av = value(a)
    if av.size == 0:
        raise ShapeError(f"softmax of an empty matrix {av.shape}")
    s = special.softmax(av, axis=1)
    return _op(s, (a,), lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),))


def row_logsumexp(a: Operand, mask: Optional[np.ndarray] = None):
    """Returns log-sum-exp of each row as an N x 1 matrix.

    Entries where `mask` is false are excluded from their row.
    """
    av = value(a)
    if av.size == 0:
        raise ShapeError(f"logsumexp of an empty matrix {av.shape}")
    if mask is not None and not np.all(mask.any(axis=1)):
        raise ContractError("logsumexp row has no unmasked entries")
    masked = av if mask is None else np.where(mask, av, -np.inf)
    # Non-finite inputs propagate to the caller
    out = special.logsumexp(masked, axis=1, keepdims=True)
    return _op(out, (a,), lambda g: (g * np.exp(masked - out),))


# =============================================================
# Vector reductions
# =============================================================


def log_sum_exp(v: Any) -> float:
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 0:
        raise ShapeError("logsumexp of an empty vector")
    return float(special.logsumexp(v))


def cosine_similarity(u: Any, v: Any) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"cosine similarity of {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _unit_rows(a: Operand):
    n = row_norm(a)
    zero = np.flatnonzero(value(n) == 0)
    if zero.size:
        raise DegenerateVectorError(f"zero-norm rows {zero.tolist()}")
    return div(a, n)


def pairwise_cosine(a: Operand, b: Optional[Operand] = None):
    """Returns the matrix of cosine similarities between rows.

    Compares `a` with itself when `b` is omitted. Entries are clamped
    to [-1, 1].
    """
    an = _unit_rows(a)
    bn = an if b is None else _unit_rows(b)
    return clip(matmul(an, transpose(bn)), -1.0, 1.0)
