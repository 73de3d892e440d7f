"""Reverse-mode differentiation over dense rank-<=2 float64 tensors.

A ``Tape`` records primitive operations as they execute; ``backward`` walks
the record once in reverse and produces exact adjoints for every leaf.  The
engine is deliberately small: double precision only, shapes are always 2-D
(scalars are 1x1, vectors are columns), and the primitive set is closed.
Iterative matrix routines built on top (square roots, logarithms) are
differentiated by unrolling their iterations through the tape.

Everything here is deterministic: identical inputs produce bit-identical
values and gradients, and ``Tape.replay`` re-executes the record to prove it.
"""

from __future__ import annotations

import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tape",
    "DiffTensor",
    "ShapeError",
    "DomainError",
    "backward",
    "check_gradient",
]


class ShapeError(ValueError):
    """Operands do not conform to the operation's shape contract."""


class DomainError(ValueError):
    """A value is outside the mathematical domain of the operation."""

    def __init__(self, op: str, index: tuple[int, int], value: float):
        self.op = op
        self.index = index
        self.value = value
        super().__init__(f"{op}: invalid input {value!r} at index {index}")


def _as_value(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 2-D array; 1-D input becomes a column."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 0:
        a = a.reshape(1, 1)
    elif a.ndim == 1:
        a = a.reshape(-1, 1)
    elif a.ndim != 2:
        raise ShapeError(f"rank-{a.ndim} tensors are not supported")
    return np.ascontiguousarray(a)


class Tape:
    """Ordered record of primitive operations.

    Each node stores the op name, the ids of its inputs, the computed value
    and any op parameters, so the forward pass can be replayed exactly and
    the reverse pass can be driven from the record alone.
    """

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.values: list[np.ndarray] = []
        self.meta: list[dict | None] = []
        self.leaf_ids: list[int] = []

    def __len__(self) -> int:
        return len(self.ops)

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray,
                meta: dict | None = None) -> int:
        nid = len(self.ops)
        self.ops.append(op)
        self.inputs.append(inputs)
        self.values.append(value)
        self.meta.append(meta)
        return nid

    def leaf(self, values) -> "DiffTensor":
        """Register a trainable leaf on this tape."""
        v = _as_value(values).copy()
        nid = self._record("leaf", (), v)
        self.leaf_ids.append(nid)
        return DiffTensor(v, self, nid)

    def replay(self) -> list[np.ndarray]:
        """Recompute every recorded value from the leaves; used by tests to
        certify the record is a faithful program trace."""
        out: list[np.ndarray] = []
        for op, inp, val, meta in zip(self.ops, self.inputs, self.values, self.meta):
            if op in ("leaf", "const"):
                out.append(val)
            else:
                out.append(_FORWARD[op](meta, *[out[i] for i in inp]))
        return out


class DiffTensor:
    """A 2-D float64 tensor, optionally attached to a tape node."""

    __slots__ = ("values", "tape", "node_id")

    def __init__(self, values, tape: Tape | None = None, node_id: int | None = None):
        self.values = _as_value(values)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on shape {self.shape}")
        return float(self.values[0, 0])

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.values.copy())

    def __repr__(self) -> str:
        tag = "const" if self.node_id is None else f"node {self.node_id}"
        return f"DiffTensor({self.shape[0]}x{self.shape[1]}, {tag})"

    # operator sugar; every path funnels through _apply
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(constant(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(constant(other), self)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "DiffTensor":
        return transpose(self)

    def sum(self) -> "DiffTensor":
        return total(self)

    def mean(self) -> "DiffTensor":
        return mean(self)


def constant(x) -> DiffTensor:
    if isinstance(x, DiffTensor):
        return x
    return DiffTensor(x)


# ---------------------------------------------------------------------------
# primitive registry: forward rules and vector-Jacobian products
# ---------------------------------------------------------------------------

def _conform_ew(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape and a.shape != (1, 1) and b.shape != (1, 1):
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_ew(grad: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    # collapse a broadcast gradient back onto a 1x1 operand
    if shape == (1, 1) and grad.shape != (1, 1):
        return np.array([[grad.sum()]])
    return grad


def _fw_matmul(meta, a, b):
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.shape} @ {b.shape}")
    return a @ b


def _fw_add(meta, a, b):
    _conform_ew(a, b, "add")
    return a + b


def _fw_sub(meta, a, b):
    _conform_ew(a, b, "sub")
    return a - b


def _fw_mul(meta, a, b):
    _conform_ew(a, b, "mul")
    return a * b


def _fw_div(meta, a, b):
    _conform_ew(a, b, "div")
    return a / b


def _checked_unary(op: str, a: np.ndarray, ok: np.ndarray) -> None:
    if not ok.all():
        idx = tuple(int(i) for i in np.argwhere(~ok)[0])
        raise DomainError(op, idx, float(a[idx]))


def _fw_log(meta, a):
    _checked_unary("log", a, a > 0)
    return np.log(a)


def _fw_sqrt(meta, a):
    _checked_unary("sqrt", a, a > 0)
    return np.sqrt(a)


def _fw_pow(meta, a):
    p = meta["exponent"]
    if p != int(p):
        _checked_unary("pow", a, a > 0)
    elif p < 0:
        _checked_unary("pow", a, a != 0)
    return a ** p


def _fw_softmax_rows(meta, a):
    shifted = a - a.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _fw_concat(meta, *parts):
    axis = meta["axis"]
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat axis={axis}: mismatched shapes {[p.shape for p in parts]}")
    return np.concatenate(parts, axis=axis)


def _fw_slice(meta, a):
    r0, r1, c0, c1 = meta["bounds"]
    if not (0 <= r0 <= r1 <= a.shape[0] and 0 <= c0 <= c1 <= a.shape[1]):
        raise ShapeError(f"slice bounds {meta['bounds']} outside shape {a.shape}")
    return a[r0:r1, c0:c1].copy()


def _fw_dot(meta, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} vs {b.shape}")
    return np.array([[float((a * b).sum())]])


_FORWARD: dict[str, Callable] = {
    "matmul": _fw_matmul,
    "transpose": lambda meta, a: a.T.copy(),
    "add": _fw_add,
    "sub": _fw_sub,
    "mul": _fw_mul,
    "div": _fw_div,
    "exp": lambda meta, a: np.exp(a),
    "log": _fw_log,
    "sqrt": _fw_sqrt,
    "pow": _fw_pow,
    "neg": lambda meta, a: -a,
    "relu": lambda meta, a: np.maximum(a, 0.0),
    "sum": lambda meta, a: np.array([[float(a.sum())]]),
    "mean": lambda meta, a: np.array([[float(a.mean())]]),
    "softmax_rows": _fw_softmax_rows,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "frob2": lambda meta, a: np.array([[float((a * a).sum())]]),
    "dot": _fw_dot,
}


def _vjp_matmul(meta, g, out, a, b):
    return g @ b.T, a.T @ g


def _vjp_add(meta, g, out, a, b):
    return _reduce_ew(g, a.shape), _reduce_ew(g, b.shape)


def _vjp_sub(meta, g, out, a, b):
    return _reduce_ew(g, a.shape), _reduce_ew(-g, b.shape)


def _vjp_mul(meta, g, out, a, b):
    return _reduce_ew(g * b, a.shape), _reduce_ew(g * a, b.shape)


def _vjp_div(meta, g, out, a, b):
    return _reduce_ew(g / b, a.shape), _reduce_ew(-g * a / (b * b), b.shape)


def _vjp_softmax_rows(meta, g, out, a):
    return (out * (g - (g * out).sum(axis=1, keepdims=True)),)


def _vjp_concat(meta, g, out, *parts):
    axis = meta["axis"]
    grads = []
    lo = 0
    for p in parts:
        hi = lo + p.shape[axis]
        grads.append(g[lo:hi, :] if axis == 0 else g[:, lo:hi])
        lo = hi
    return tuple(grads)


def _vjp_slice(meta, g, out, a):
    r0, r1, c0, c1 = meta["bounds"]
    full = np.zeros_like(a)
    full[r0:r1, c0:c1] = g
    return (full,)


_VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "transpose": lambda meta, g, out, a: (g.T,),
    "add": _vjp_add,
    "sub": _vjp_sub,
    "mul": _vjp_mul,
    "div": _vjp_div,
    "exp": lambda meta, g, out, a: (g * out,),
    "log": lambda meta, g, out, a: (g / a,),
    "sqrt": lambda meta, g, out, a: (g * 0.5 / out,),
    "pow": lambda meta, g, out, a: (g * meta["exponent"] * a ** (meta["exponent"] - 1.0),),
    "neg": lambda meta, g, out, a: (-g,),
    "relu": lambda meta, g, out, a: (g * (a > 0.0),),
    "sum": lambda meta, g, out, a: (np.full_like(a, float(g[0, 0])),),
    "mean": lambda meta, g, out, a: (np.full_like(a, float(g[0, 0]) / a.size),),
    "softmax_rows": _vjp_softmax_rows,
    "concat": _vjp_concat,
    "slice": _vjp_slice,
    "frob2": lambda meta, g, out, a: (2.0 * float(g[0, 0]) * a,),
    "dot": lambda meta, g, out, a, b: (float(g[0, 0]) * b, float(g[0, 0]) * a),
}


def _apply(op: str, operands: Sequence[DiffTensor], meta: dict | None = None) -> DiffTensor:
    tapes = {t.tape for t in operands if t.tape is not None}
    if len(tapes) > 1:
        raise ValueError(f"{op}: operands belong to different tapes")
    value = _FORWARD[op](meta, *[t.values for t in operands])
    if not tapes:
        return DiffTensor(value)
    tape = tapes.pop()
    ids = []
    for t in operands:
        if t.tape is None:
            ids.append(tape._record("const", (), t.values))
        else:
            ids.append(t.node_id)
    nid = tape._record(op, tuple(ids), value, meta)
    return DiffTensor(value, tape, nid)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> DiffTensor:
    return _apply("matmul", (constant(a), constant(b)))


def transpose(a) -> DiffTensor:
    return _apply("transpose", (constant(a),))


def add(a, b) -> DiffTensor:
    return _apply("add", (constant(a), constant(b)))


def sub(a, b) -> DiffTensor:
    return _apply("sub", (constant(a), constant(b)))


def mul(a, b) -> DiffTensor:
    return _apply("mul", (constant(a), constant(b)))


def div(a, b) -> DiffTensor:
    return _apply("div", (constant(a), constant(b)))


def exp(a) -> DiffTensor:
    return _apply("exp", (constant(a),))


def log(a) -> DiffTensor:
    return _apply("log", (constant(a),))


def sqrt(a) -> DiffTensor:
    return _apply("sqrt", (constant(a),))


def power(a, exponent: float) -> DiffTensor:
    return _apply("pow", (constant(a),), {"exponent": float(exponent)})


def neg(a) -> DiffTensor:
    return _apply("neg", (constant(a),))


def relu(a) -> DiffTensor:
    return _apply("relu", (constant(a),))


def total(a) -> DiffTensor:
    return _apply("sum", (constant(a),))


def mean(a) -> DiffTensor:
    return _apply("mean", (constant(a),))


def softmax_rows(a) -> DiffTensor:
    return _apply("softmax_rows", (constant(a),))


def concat(parts: Iterable, axis: int) -> DiffTensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    ops = tuple(constant(p) for p in parts)
    if not ops:
        raise ShapeError("concat of zero parts")
    return _apply("concat", ops, {"axis": axis})


def slice2d(a, rows: tuple[int, int], cols: tuple[int, int]) -> DiffTensor:
    bounds = (int(rows[0]), int(rows[1]), int(cols[0]), int(cols[1]))
    return _apply("slice", (constant(a),), {"bounds": bounds})


def frobenius_sq(a) -> DiffTensor:
    return _apply("frob2", (constant(a),))


def dot(a, b) -> DiffTensor:
    return _apply("dot", (constant(a), constant(b)))


# small compositions used everywhere downstream

def eye(n: int, tape: Tape | None = None) -> DiffTensor:
    return DiffTensor(np.eye(n))


def broadcast_rows(row: DiffTensor, n: int) -> DiffTensor:
    """Stack a 1xd row vector n times (ones-matmul, stays on the tape)."""
    if row.shape[0] != 1:
        raise ShapeError(f"broadcast_rows expects a row vector, got {row.shape}")
    return matmul(DiffTensor(np.ones((n, 1))), row)


def trace(a) -> DiffTensor:
    a = constant(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"trace of non-square {a.shape}")
    return total(mul(a, DiffTensor(np.eye(a.shape[0]))))


def diag_part(a) -> DiffTensor:
    """Main diagonal as an nx1 column (mask, then row-sum via matmul)."""
    a = constant(a)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"diag_part of non-square {a.shape}")
    return matmul(mul(a, DiffTensor(np.eye(n))), DiffTensor(np.ones((n, 1))))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def backward(loss: DiffTensor) -> dict[int, DiffTensor]:
    """Accumulate adjoints of a scalar loss for every leaf on its tape.

    Returns a map from leaf node id to the gradient tensor; leaves the loss
    never touched get zero gradients of the right shape.
    """
    if loss.tape is None or loss.node_id is None:
        raise ValueError("backward: loss is not on a tape")
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    tape = loss.tape
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.node_id] = np.ones((1, 1))
    for nid in range(loss.node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        op = tape.ops[nid]
        if op in ("leaf", "const"):
            continue
        inp = tape.inputs[nid]
        in_vals = [tape.values[i] for i in inp]
        in_grads = _VJP[op](tape.meta[nid], g, tape.values[nid], *in_vals)
        for i, gi in zip(inp, in_grads):
            if gi is None or tape.ops[i] == "const":
                continue
            if grads[i] is None:
                grads[i] = gi.copy()
            else:
                grads[i] = grads[i] + gi
    out = {}
    for lid in tape.leaf_ids:
        if lid <= loss.node_id and grads[lid] is not None:
            out[lid] = DiffTensor(grads[lid])
        else:
            out[lid] = DiffTensor(np.zeros_like(tape.values[lid]))
    return out


def check_gradient(f: Callable[[list[DiffTensor]], DiffTensor],
                   leaves: Sequence[np.ndarray],
                   h: float = 1e-5) -> float:
    """Compare tape gradients of ``f`` against central finite differences.

    ``f`` receives a list of tensors (tape leaves for the analytic pass,
    plain constants for the perturbed passes) and must return a scalar.
    Returns the max over all leaf entries of
    ``|analytic - central| / max(1, |central|)``; non-finite evaluations
    report an infinite error and warn with the offending location.
    """
    if h <= 0:
        raise ValueError("check_gradient: h must be positive")
    leaf_vals = [_as_value(x) for x in leaves]

    tape = Tape()
    taped = [tape.leaf(v) for v in leaf_vals]
    loss = f(taped)
    grads = backward(loss)
    analytic = [grads[t.node_id].values for t in taped]

    worst = 0.0
    for k, base in enumerate(leaf_vals):
        for idx in np.ndindex(base.shape):
            vals_hi = [v.copy() for v in leaf_vals]
            vals_lo = [v.copy() for v in leaf_vals]
            vals_hi[k][idx] += h
            vals_lo[k][idx] -= h
            hi = f([DiffTensor(v) for v in vals_hi]).item()
            lo = f([DiffTensor(v) for v in vals_lo]).item()
            if not (math.isfinite(hi) and math.isfinite(lo)):
                warnings.warn(f"check_gradient: non-finite evaluation at leaf {k}, entry {idx}")
                return math.inf
            central = (hi - lo) / (2.0 * h)
            err = abs(analytic[k][idx] - central) / max(1.0, abs(central))
            worst = max(worst, err)
    return worst
