"""Dense float64 matrices with reverse-mode gradients.

Every forward operation appends a node to the active :class:`Tape`;
:func:`backward` walks that tape in exact reverse creation order.  Leaves
(parameters and constants) live outside any tape, so one set of parameters
can be reused across many per-epoch tapes.

Elementwise binary ops broadcast like numpy; gradients are summed back
over broadcast axes.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy import sparse

LOG_EPS = 1e-12

_ids = itertools.count()


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class DiffMatrix:
    """A 2-D float64 array plus an accumulated gradient of the same shape."""

    __slots__ = ("values", "_grad", "node_id", "requires_grad", "tape", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None,
                 _tape: "Tape | None" = None):
        arr = np.array(values, dtype=np.float64, copy=True) if _tape is None else values
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2:
            raise ShapeError(f"DiffMatrix must be 2-D, got shape {arr.shape}")
        if _tape is None and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite entries in leaf {name or ''}".strip())
        self.values = arr
        self._grad = None
        self.node_id = next(_ids)
        self.requires_grad = requires_grad
        self.tape = _tape
        self.name = name

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.values)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = np.asarray(value, dtype=np.float64)

    def zero_grad(self):
        self._grad = None

    def item(self) -> float:
        if self.shape != (1, 1):
            raise ShapeError(f"item() needs a 1x1 matrix, got {self.shape}")
        return float(self.values[0, 0])

    def __repr__(self):
        return f"DiffMatrix(shape={self.shape}, name={self.name!r})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_matrix(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if np.isscalar(other):
            return scalar_mul(self, 1.0 / float(other))
        return div(self, other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    @property
    def T(self):
        return transpose(self)


def constant(values, name: str | None = None) -> DiffMatrix:
    return DiffMatrix(values, requires_grad=False, name=name)


def parameter(values, name: str | None = None) -> DiffMatrix:
    return DiffMatrix(values, requires_grad=True, name=name)


def _as_matrix(x) -> DiffMatrix:
    if isinstance(x, DiffMatrix):
        return x
    return constant(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[DiffMatrix, ...]
    output: DiffMatrix
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only record of forward operations."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __len__(self):
        return len(self.nodes)

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack.pop()
        return False


_default_tape = Tape()
_tape_stack: list[Tape] = []


def current_tape() -> Tape:
    return _tape_stack[-1] if _tape_stack else _default_tape


def reset_default_tape():
    global _default_tape
    _default_tape = Tape()


# backward rules: kind -> fn(node, grad_out) -> tuple of input grads (None = skip)
BACKWARD_RULES: dict[str, Callable] = {}


def _record(kind: str, inputs: Sequence[DiffMatrix], out: np.ndarray, **saved) -> DiffMatrix:
    if not np.isfinite(out).all():
        shapes = ", ".join(str(x.shape) for x in inputs)
        raise NonFiniteError(f"{kind}: non-finite output for inputs of shape {shapes}")
    tape = current_tape()
    res = DiffMatrix(out, _tape=tape)
    res.requires_grad = any(x.requires_grad for x in inputs)
    tape.nodes.append(_Node(kind, tuple(inputs), res, saved))
    return res


def _check_broadcast(kind, a: DiffMatrix, b: DiffMatrix):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    if shape[0] == 1 and grad.shape[0] != 1:
        grad = grad.sum(axis=0, keepdims=True)
    if shape[1] == 1 and grad.shape[1] != 1:
        grad = grad.sum(axis=1, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives

def matmul(a, b) -> DiffMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    if a.cols != b.rows:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _record("matmul", (a, b), a.values @ b.values)


def _bw_matmul(node, g):
    a, b = node.inputs
    ga = g @ b.values.T if a.requires_grad else None
    gb = a.values.T @ g if b.requires_grad else None
    return ga, gb


def add(a, b) -> DiffMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _check_broadcast("add", a, b)
    return _record("add", (a, b), a.values + b.values)


def _bw_add(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> DiffMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _check_broadcast("sub", a, b)
    return _record("sub", (a, b), a.values - b.values)


def _bw_sub(node, g):
    a, b = node.inputs
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def elementwise_mul(a, b) -> DiffMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _check_broadcast("elementwise_mul", a, b)
    return _record("elementwise_mul", (a, b), a.values * b.values)


def _bw_mul(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g * b.values, a.shape) if a.requires_grad else None
    gb = _unbroadcast(g * a.values, b.shape) if b.requires_grad else None
    return ga, gb


def div(a, b) -> DiffMatrix:
    a, b = _as_matrix(a), _as_matrix(b)
    _check_broadcast("div", a, b)
    return _record("div", (a, b), a.values / b.values)


def _bw_div(node, g):
    a, b = node.inputs
    ga = _unbroadcast(g / b.values, a.shape) if a.requires_grad else None
    gb = (_unbroadcast(-g * node.output.values / b.values, b.shape)
          if b.requires_grad else None)
    return ga, gb


def scalar_mul(a, alpha: float) -> DiffMatrix:
    a = _as_matrix(a)
    return _record("scalar_mul", (a,), a.values * alpha, alpha=alpha)


def _bw_scalar_mul(node, g):
    return (g * node.saved["alpha"],)


def transpose(a) -> DiffMatrix:
    a = _as_matrix(a)
    return _record("transpose", (a,), a.values.T.copy())


def _bw_transpose(node, g):
    return (g.T,)


def row_normalize(a, eps: float = 0.0, zero_rows: str = "keep") -> DiffMatrix:
    """Divide each row by ``rowsum + eps``.

    Rows whose sum is exactly zero are left unchanged (``zero_rows="keep"``)
    or replaced by the uniform distribution (``zero_rows="uniform"``).
    """
    a = _as_matrix(a)
    if zero_rows not in ("keep", "uniform"):
        raise ValueError(f"row_normalize: unknown zero_rows mode {zero_rows!r}")
    s = a.values.sum(axis=1, keepdims=True)
    zero = (s == 0.0)
    denom = np.where(zero, 1.0, s + eps)
    out = a.values / denom
    if zero_rows == "uniform" and zero.any():
        out = np.where(zero, 1.0 / a.cols, out)
    return _record("row_normalize", (a,), out, denom=denom, zero=zero, mode=zero_rows)


def _bw_row_normalize(node, g):
    y = node.output.values
    denom, zero = node.saved["denom"], node.saved["zero"]
    ga = (g - (g * y).sum(axis=1, keepdims=True)) / denom
    if zero.any():
        # zero-sum rows bypass the quotient rule
        fallback = g if node.saved["mode"] == "keep" else np.zeros_like(g)
        ga = np.where(zero, fallback, ga)
    return (ga,)


def relu(a) -> DiffMatrix:
    a = _as_matrix(a)
    return _record("relu", (a,), np.maximum(a.values, 0.0))


def _bw_relu(node, g):
    return (g * (node.inputs[0].values > 0.0),)


def leaky_relu(a, slope: float = 0.2) -> DiffMatrix:
    a = _as_matrix(a)
    x = a.values
    return _record("leaky_relu", (a,), np.where(x > 0.0, x, slope * x), slope=slope)


def _bw_leaky_relu(node, g):
    x = node.inputs[0].values
    return (g * np.where(x > 0.0, 1.0, node.saved["slope"]),)


def sigmoid(a) -> DiffMatrix:
    a = _as_matrix(a)
    x = a.values
    # split by sign so exp never overflows
    ex = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _record("sigmoid", (a,), out)


def _bw_sigmoid(node, g):
    y = node.output.values
    return (g * y * (1.0 - y),)


def log(a, eps: float = LOG_EPS) -> DiffMatrix:
    """Natural log of ``a + eps``; inputs must be non-negative."""
    a = _as_matrix(a)
    if np.any(a.values < 0.0):
        raise ValueError(f"log: negative input (min {a.values.min():.3g}) for shape {a.shape}")
    return _record("log", (a,), np.log(a.values + eps), eps=eps)


def _bw_log(node, g):
    return (g / (node.inputs[0].values + node.saved["eps"]),)


def sqrt(a, eps: float = 0.0) -> DiffMatrix:
    a = _as_matrix(a)
    if np.any(a.values + eps < 0.0):
        raise ValueError(f"sqrt: negative input for shape {a.shape}")
    return _record("sqrt", (a,), np.sqrt(a.values + eps))


def _bw_sqrt(node, g):
    return (g * 0.5 / node.output.values,)


def concat_cols(mats: Sequence[DiffMatrix]) -> DiffMatrix:
    mats = [_as_matrix(m) for m in mats]
    rows = {m.rows for m in mats}
    if len(rows) != 1:
        raise ShapeError(f"concat_cols: row counts differ: {[m.shape for m in mats]}")
    return _record("concat_cols", tuple(mats), np.concatenate([m.values for m in mats], axis=1))


def _bw_concat_cols(node, g):
    out, start = [], 0
    for m in node.inputs:
        out.append(g[:, start:start + m.cols])
        start += m.cols
    return tuple(out)


def sum_all(a) -> DiffMatrix:
    a = _as_matrix(a)
    return _record("sum_all", (a,), np.array([[a.values.sum()]]))


def _bw_sum_all(node, g):
    return (np.full(node.inputs[0].shape, g[0, 0]),)


def sum_rows(a) -> DiffMatrix:
    """Sum along each row: (n, m) -> (n, 1)."""
    a = _as_matrix(a)
    return _record("sum_rows", (a,), a.values.sum(axis=1, keepdims=True))


def _bw_sum_rows(node, g):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def sum_cols(a) -> DiffMatrix:
    """Sum down each column: (n, m) -> (1, m)."""
    a = _as_matrix(a)
    return _record("sum_cols", (a,), a.values.sum(axis=0, keepdims=True))


def _bw_sum_cols(node, g):
    return (np.broadcast_to(g, node.inputs[0].shape).copy(),)


def mean_rows(a) -> DiffMatrix:
    """Mean along each row: (n, m) -> (n, 1)."""
    a = _as_matrix(a)
    return _record("mean_rows", (a,), a.values.mean(axis=1, keepdims=True))


def _bw_mean_rows(node, g):
    x = node.inputs[0]
    return (np.broadcast_to(g / x.cols, x.shape).copy(),)


def row_softmax(a) -> DiffMatrix:
    a = _as_matrix(a)
    z = a.values - a.values.max(axis=1, keepdims=True)
    ez = np.exp(z)
    return _record("row_softmax", (a,), ez / ez.sum(axis=1, keepdims=True))


def _bw_row_softmax(node, g):
    y = node.output.values
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def take_rows(a, index) -> DiffMatrix:
    a = _as_matrix(a)
    idx = np.asarray(index, dtype=np.intp)
    if idx.size and (idx.min() < -a.rows or idx.max() >= a.rows):
        raise ShapeError(f"take_rows: index out of range for shape {a.shape}")
    return _record("take_rows", (a,), a.values[idx], index=idx)


def _bw_take_rows(node, g):
    idx = node.saved["index"] % node.inputs[0].rows
    scatter = sparse.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))),
                                shape=(node.inputs[0].rows, idx.size))
    return (np.asarray(scatter @ g),)


def pair_sq_dist(a, i, j) -> DiffMatrix:
    """Column of squared distances ||a_i - a_j||^2 for index pairs (i[k], j[k])."""
    a = _as_matrix(a)
    i = np.asarray(i, dtype=np.intp)
    j = np.asarray(j, dtype=np.intp)
    if i.shape != j.shape or i.ndim != 1:
        raise ShapeError("pair_sq_dist: index arrays must be 1-d and equal length")
    for idx in (i, j):
        if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
            raise ShapeError(f"pair_sq_dist: index out of range for shape {a.shape}")
    diff = a.values[i] - a.values[j]
    out = np.einsum("ij,ij->i", diff, diff).reshape(-1, 1)
    return _record("pair_sq_dist", (a,), out, i=i, j=j, diff=diff)


def _bw_pair_sq_dist(node, g):
    i, j = node.saved["i"], node.saved["j"]
    contrib = 2.0 * g * node.saved["diff"]
    m, n = i.size, node.inputs[0].rows
    # +1 at row i[k], -1 at row j[k]
    scatter = sparse.csr_matrix(
        (np.concatenate([np.ones(m), -np.ones(m)]),
         (np.concatenate([i, j]), np.concatenate([np.arange(m), np.arange(m)]))),
        shape=(n, m))
    return (np.asarray(scatter @ contrib),)


BACKWARD_RULES.update({
    "pair_sq_dist": _bw_pair_sq_dist,
    "matmul": _bw_matmul,
    "add": _bw_add,
    "sub": _bw_sub,
    "elementwise_mul": _bw_mul,
    "div": _bw_div,
    "scalar_mul": _bw_scalar_mul,
    "transpose": _bw_transpose,
    "row_normalize": _bw_row_normalize,
    "relu": _bw_relu,
    "leaky_relu": _bw_leaky_relu,
    "sigmoid": _bw_sigmoid,
    "log": _bw_log,
    "sqrt": _bw_sqrt,
    "concat_cols": _bw_concat_cols,
    "sum_all": _bw_sum_all,
    "sum_rows": _bw_sum_rows,
    "sum_cols": _bw_sum_cols,
    "mean_rows": _bw_mean_rows,
    "row_softmax": _bw_row_softmax,
    "take_rows": _bw_take_rows,
})

_UNARY = {
    "transpose": transpose, "relu": relu, "sigmoid": sigmoid, "sum_all": sum_all,
    "sum_rows": sum_rows, "sum_cols": sum_cols, "mean_rows": mean_rows,
    "row_softmax": row_softmax,
}
_BINARY = {
    "matmul": matmul, "add": add, "sub": sub, "elementwise_mul": elementwise_mul, "div": div,
}


def forward_op(kind: str, inputs: Sequence[DiffMatrix], **kwargs) -> DiffMatrix:
    """Apply the primitive named ``kind``; keyword args carry slopes, eps, alpha."""
    if kind in _UNARY:
        (a,) = inputs
        return _UNARY[kind](a)
    if kind in _BINARY:
        a, b = inputs
        return _BINARY[kind](a, b)
    if kind == "scalar_mul":
        (a,) = inputs
        return scalar_mul(a, kwargs["alpha"])
    if kind == "leaky_relu":
        (a,) = inputs
        return leaky_relu(a, kwargs.get("slope", 0.2))
    if kind == "log":
        (a,) = inputs
        return log(a, kwargs.get("eps", LOG_EPS))
    if kind == "row_normalize":
        (a,) = inputs
        return row_normalize(a, **kwargs)
    if kind == "concat_cols":
        return concat_cols(inputs)
    if kind == "take_rows":
        (a,) = inputs
        return take_rows(a, kwargs["index"])
    if kind == "pair_sq_dist":
        (a,) = inputs
        return pair_sq_dist(a, kwargs["i"], kwargs["j"])
    raise ValueError(f"unknown op kind {kind!r}")


def backward(loss: DiffMatrix) -> None:
    """Accumulate d(loss)/d(x) into ``x.grad`` for every leaf that requires grad."""
    if loss.shape != (1, 1):
        raise ShapeError(f"backward: loss must be 1x1, got {loss.shape}")
    tape = loss.tape
    if tape is None or not tape.nodes:
        raise ValueError("backward: loss was not produced on a tape")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones((1, 1))}
    for node in reversed(tape.nodes):
        g = grads.pop(node.output.node_id, None)
        if g is None:
            continue
        in_grads = BACKWARD_RULES[node.kind](node, g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not x.requires_grad:
                continue
            if x.tape is None:
                x.grad = x.grad + gx
            elif x.node_id in grads:
                grads[x.node_id] = grads[x.node_id] + gx
            else:
                grads[x.node_id] = gx


def zero_grads(params: Mapping[str, DiffMatrix] | Sequence[DiffMatrix]) -> None:
    items = params.values() if isinstance(params, Mapping) else params
    for p in items:
        p.zero_grad()


def _param_items(params) -> list[tuple[str, DiffMatrix]]:
    if isinstance(params, Mapping):
        return list(params.items())
    if hasattr(params, "named"):
        return list(params.named())
    return [(str(i), p) for i, p in enumerate(params)]


def finite_diff_check(f: Callable[[object], DiffMatrix], params, step: float = 1e-6) -> float:
    """Max over parameter entries of |analytic - central difference| / max(1, |analytic|).

    ``params`` is a mapping of leaves, a sequence of leaves, or any object with a
    ``named()`` method yielding ``(name, DiffMatrix)`` pairs.  ``f(params)``
    must build its loss on a fresh tape each call.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    items = _param_items(params)

    def evaluate() -> DiffMatrix:
        with Tape():
            return f(params)

    first = evaluate()
    second = evaluate()
    if first.item() != second.item():
        raise ValueError("finite_diff_check: f is not deterministic "
                         f"({first.item()!r} != {second.item()!r})")
    for _, p in items:
        p.zero_grad()
    backward(first)
    worst = 0.0
    for _, p in items:
        analytic = p.grad.copy()
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = evaluate().item()
            flat[i] = orig - step
            down = evaluate().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    for _, p in items:
        p.zero_grad()
    return worst


@contextlib.contextmanager
def no_record():
    """Run forward ops on a throwaway tape."""
    with Tape() as t:
        yield t
