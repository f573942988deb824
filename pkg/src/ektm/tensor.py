"""Dense float64 tensors with reverse-mode differentiation.

Only the operators needed by the router, transmitter, backbone and losses are
provided. Values live in a numpy array; every non-leaf tensor keeps an
operator tag and (when a gradient is needed) references to its operands and a
closure mapping the output cotangent to operand cotangents.

    >>> x = tensor([1.0, 2.0], requires_grad=True)
    >>> grads = backward(sum_all(x * x))
    >>> grads[x]
    array([2., 4.])
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from .errors import ContractError, DomainError, ShapeError

__all__ = [
    "Tensor", "leaf", "tensor", "apply", "no_grad", "detach", "backward", "grad_check", "grad_check_report",
    "add", "sub", "mul", "elem_mul", "div", "scale", "neg", "matmul", "transpose",
    "reshape", "concat", "concat_rows", "sum", "sum_all", "mean", "mean_rows",
    "dot", "l2_norm", "sigmoid", "relu", "max_zero", "softmax", "softmax_rows",
    "log", "exp", "clamp", "maximum", "embedding", "OPS",
]


class Tensor:
    """A node in a computation graph.

    ``parents`` and ``backward_fn`` are only populated when some operand
    requires a gradient; the operator tag ``op`` is always kept.
    """

    __slots__ = ("data", "requires_grad", "op", "parents", "backward_fn", "name")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, op="leaf", parents=(), backward_fn=None, name=None):
        self.data = data
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def values(self):
        """Flat row-major copy of the values."""
        return self.data.ravel().copy()

    @property
    def is_leaf(self):
        return not self.parents

    @property
    def T(self):
        return transpose(self)

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"tensor of shape {self.shape} is not a scalar")

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = "" if self.op == "leaf" else f", op={self.op}"
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{tag}{rg})"

    def __len__(self):
        return len(self.data)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / other)
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


# --------------------------------------------------------------------------
# construction

def leaf(shape, values, requires_grad=False, name=None) -> Tensor:
    """Build a graph leaf from an explicit shape and flat row-major values."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    flat = np.asarray(values, dtype=np.float64).ravel()
    if math.prod(shape) != flat.size:
        raise ShapeError(f"shape {shape} needs {math.prod(shape)} values, got {flat.size}")
    if not np.all(np.isfinite(flat)):
        raise DomainError("leaf values must be finite")
    return Tensor(flat.reshape(shape).copy(), requires_grad=requires_grad, name=name)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    """Wrap array-like data as a leaf (copying it)."""
    arr = np.array(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("leaf values must be finite")
    return Tensor(arr, requires_grad=requires_grad, name=name)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


class _GradMode(threading.local):
    def __init__(self):
        self.enabled = True


_grad_mode = _GradMode()


class no_grad:
    """Context manager: operations inside build no graph."""

    def __enter__(self):
        self._prev = _grad_mode.enabled
        _grad_mode.enabled = False

    def __exit__(self, *exc):
        _grad_mode.enabled = self._prev


def _node(data, op, parents, backward_fn) -> Tensor:
    if _grad_mode.enabled and any(p.requires_grad for p in parents):
        return Tensor(data, True, op, tuple(parents), backward_fn)
    return Tensor(data, False, op)


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


# --------------------------------------------------------------------------
# elementwise arithmetic

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "add")
    return _node(a.data + b.data, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return _node(a.data - b.data, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "elem_mul")
    return _node(a.data * b.data, "elem_mul", (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


elem_mul = mul


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b, "div")
    if np.any(b.data == 0):
        raise DomainError("div: zero divisor")
    out = a.data / b.data
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)))


def scale(t, c: float) -> Tensor:
    t = _as_tensor(t)
    c = float(c)
    if c == 1.0:
        return t
    return _node(t.data * c, "scale", (t,), lambda g: (g * c,))


def neg(t) -> Tensor:
    return scale(t, -1.0)


# --------------------------------------------------------------------------
# linear algebra and layout

def _swap_last(x):
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes are batch axes and broadcast like numpy."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch axes of {a.shape} and {b.shape} do not conform") from None

    def bw(g):
        ga = _unbroadcast(np.matmul(g, _swap_last(b.data)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(_swap_last(a.data), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _node(out, "matmul", (a, b), bw)


def transpose(t, axes=None) -> Tensor:
    """Reverse-free transpose: swaps the last two axes unless ``axes`` is given."""
    t = _as_tensor(t)
    if axes is None:
        if t.ndim < 2:
            raise ShapeError(f"transpose needs rank >= 2, got {t.shape}")
        axes = list(range(t.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(t.data, axes), "transpose", (t,), lambda g: (np.transpose(g, inverse),))


def reshape(t, shape) -> Tensor:
    t = _as_tensor(t)
    try:
        out = t.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {t.shape} to {shape}") from None
    return _node(out, "reshape", (t,), lambda g: (g.reshape(t.shape),))


def concat(ts: Sequence, axis=0) -> Tensor:
    ts = [_as_tensor(t) for t in ts]
    if not ts:
        raise ShapeError("concat of zero tensors")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _node(out, "concat", tuple(ts), lambda g: tuple(np.split(g, cuts, axis=axis)))


def concat_rows(ts: Sequence) -> Tensor:
    return concat(ts, axis=0)


def _expand(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum(t, axis=None, keepdims=False) -> Tensor:  # noqa: A001 - mirrors numpy
    t = _as_tensor(t)
    out = np.asarray(t.data.sum(axis=axis, keepdims=keepdims))
    return _node(out, "sum", (t,), lambda g: (_expand(g, t.shape, axis, keepdims),))


def sum_all(t) -> Tensor:
    return sum(t)


def mean(t, axis=None, keepdims=False) -> Tensor:
    t = _as_tensor(t)
    n = t.size if axis is None else t.shape[axis]
    out = np.asarray(t.data.mean(axis=axis, keepdims=keepdims))
    return _node(out, "mean", (t,), lambda g: (_expand(g / n, t.shape, axis, keepdims),))


def mean_rows(t) -> Tensor:
    return mean(t, axis=0)


def dot(a, b) -> Tensor:
    """Inner product over the last axis (row-wise for matrices)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} differ")
    out = np.asarray(np.einsum("...i,...i->...", a.data, b.data))
    return _node(out, "dot", (a, b), lambda g: (g[..., None] * b.data, g[..., None] * a.data))


def l2_norm(t) -> Tensor:
    """Euclidean norm over the last axis. The gradient at the origin is taken as 0."""
    t = _as_tensor(t)
    out = np.sqrt(np.einsum("...i,...i->...", t.data, t.data))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, t.data / safe[..., None], 0.0) * g[..., None],)

    return _node(np.asarray(out), "l2_norm", (t,), bw)


# --------------------------------------------------------------------------
# nonlinearities

def sigmoid(t) -> Tensor:
    t = _as_tensor(t)
    s = expit(t.data)
    return _node(s, "sigmoid", (t,), lambda g: (g * s * (1.0 - s),))


def _rectify(t, op) -> Tensor:
    t = _as_tensor(t)
    mask = t.data > 0
    return _node(np.where(mask, t.data, 0.0), op, (t,), lambda g: (g * mask,))


def relu(t) -> Tensor:
    return _rectify(t, "relu")


def max_zero(t) -> Tensor:
    """max(0, t); the hinge of the calibration loss."""
    return _rectify(t, "max_zero")


def _sum_keep(x, axis):
    if axis in (-1, x.ndim - 1):
        return np.einsum("...i->...", x)[..., None]  # much faster than .sum on a short last axis
    return x.sum(axis=axis, keepdims=True)


def softmax(t, axis=-1) -> Tensor:
    """Softmax along ``axis``, shifted by the maximum before exponentiation.

    The shift is the global maximum when the value spread is below 600 (no
    row can underflow to all zeros), else the per-row maximum.
    """
    t = _as_tensor(t)
    x = t.data
    hi = x.max()
    if hi - x.min() < 600.0:
        s = x - hi
    else:
        s = x - x.max(axis=axis, keepdims=True)
    np.exp(s, out=s)
    s /= _sum_keep(s, axis)

    def bw(g):
        gs = g * s
        gs -= s * _sum_keep(gs, axis)
        return (gs,)

    return _node(s, "softmax", (t,), bw)


def softmax_rows(t) -> Tensor:
    return softmax(t, axis=-1)


def log(t) -> Tensor:
    t = _as_tensor(t)
    if np.any(t.data <= 0):
        raise DomainError("log of a non-positive value")
    return _node(np.log(t.data), "log", (t,), lambda g: (g / t.data,))


def exp(t) -> Tensor:
    t = _as_tensor(t)
    out = np.exp(t.data)
    return _node(out, "exp", (t,), lambda g: (g * out,))


def clamp(t, lo, hi) -> Tensor:
    t = _as_tensor(t)
    inside = (t.data >= lo) & (t.data <= hi)
    return _node(np.clip(t.data, lo, hi), "clamp", (t,), lambda g: (g * inside,))


def maximum(t, floor: float) -> Tensor:
    """Elementwise max(t, floor) for a constant floor."""
    t = _as_tensor(t)
    keep = t.data >= floor
    return _node(np.where(keep, t.data, floor), "maximum", (t,), lambda g: (g * keep,))


def embedding(table, index) -> Tensor:
    """Row gather ``table[index]``; ``index`` is an integer array."""
    table = _as_tensor(table)
    index = np.asarray(index)
    if table.ndim != 2:
        raise ShapeError(f"embedding table must be a matrix, got {table.shape}")
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ShapeError(f"embedding index out of range for vocabulary {table.shape[0]}")

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(table.data[index], "embedding", (table,), bw)


# --------------------------------------------------------------------------
# stop-gradient

class _DetachTape(threading.local):
    """Lets a finite-difference probe hold detached values at the base point."""

    def __init__(self):
        self.mode = None  # None | "record" | "replay"
        self.values = []
        self.cursor = 0


_tape = _DetachTape()


def detach(t) -> Tensor:
    """Forward identity whose result is a fresh leaf: no gradient flows back."""
    t = _as_tensor(t)
    data = t.data
    if _tape.mode == "record":
        _tape.values.append(data)
    elif _tape.mode == "replay":
        if _tape.cursor >= len(_tape.values):
            raise ContractError("function built a different graph while being probed")
        data = _tape.values[_tape.cursor]
        _tape.cursor += 1
    return Tensor(data, False, "detach")


# --------------------------------------------------------------------------
# differentiation

def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Tensor, leaves=None) -> dict:
    """Gradients of a scalar ``root`` with respect to its requires_grad leaves.

    Returns a dict keyed by leaf tensor (identity), in topological order. When
    ``leaves`` is given, exactly those tensors are returned, with zero arrays
    for any that the root does not depend on.
    """
    if root.size != 1 or root.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    grads = {}
    found = {}
    if root.requires_grad:
        order = _topo_order(root)
        grads[id(root)] = np.ones_like(root.data)
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                found[node] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                # cotangents are never mutated in place, so aliasing is safe
                grads[key] = grads[key] + pg if key in grads else pg
        found = {k: np.array(found[k], dtype=np.float64) for k in reversed(list(found))}
    if leaves is None:
        return found
    return {t: found.get(t, np.zeros_like(t.data)) for t in leaves}


def grad_check(function: Callable, inputs, eps=1e-5, probe_dtype=np.longdouble) -> float:
    """Max relative error between backward() and central finite differences.

    ``function`` maps leaf tensors (one per entry of ``inputs``) to a scalar.
    Values passing through :func:`detach` are held at their base-point value
    while probing, so the check measures the same partial derivative the
    graph defines.

    The probes are evaluated in ``probe_dtype`` (x87 extended precision on
    most x86-64 builds). In float64 the difference quotient carries about
    |f|*1e-16/eps of rounding noise, which swamps the relative tolerance for
    coordinates whose gradient is below ~1e-6; the analytic side is always
    float64.
    """
    return max(grad_check_report(function, inputs, eps, probe_dtype), default=0.0)


def grad_check_report(function: Callable, inputs, eps=1e-5, probe_dtype=np.longdouble, max_coords=None, seed=0):
    """Per-input max relative error; see :func:`grad_check`.

    With ``max_coords`` only that many randomly chosen coordinates of each
    input are probed.
    """
    if not 0 < eps <= 1e-3:
        raise ContractError(f"eps must lie in (0, 1e-3], got {eps}")
    base = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    leaves = [Tensor(b.copy(), requires_grad=True) for b in base]

    _tape.mode, _tape.values, _tape.cursor = "record", [], 0
    try:
        out = function(*leaves)
    finally:
        _tape.mode = None
    if out.size != 1 or out.ndim > 1:
        raise ContractError(f"function must return a scalar, got shape {out.shape}")
    analytic = backward(out, leaves)
    frozen = _tape.values

    def probe(k, flat_index, delta):
        args = [Tensor(b.astype(probe_dtype)) for b in base]
        args[k].data.reshape(-1)[flat_index] += delta
        _tape.mode, _tape.values, _tape.cursor = "replay", frozen, 0
        try:
            return function(*args).data.reshape(-1)[0]
        finally:
            _tape.mode, _tape.values = None, []

    rng = np.random.default_rng(seed)
    report = []
    for k, leaf_t in enumerate(leaves):
        a_flat = analytic[leaf_t].reshape(-1)
        coords = range(base[k].size)
        if max_coords is not None and base[k].size > max_coords:
            coords = np.sort(rng.choice(base[k].size, size=max_coords, replace=False))
        worst = 0.0
        for j in coords:
            n = (probe(k, j, eps) - probe(k, j, -eps)) / (2.0 * eps)
            a = a_flat[j]
            err = abs(a - n) / max(abs(a), abs(n), 1e-8)
            worst = max(worst, float(err))
        report.append(worst)
    return report


# --------------------------------------------------------------------------
# name-based dispatch

OPS = {
    "add": add,
    "sub": sub,
    "elem_mul": mul,
    "div": div,
    "scale": scale,
    "matmul": matmul,
    "transpose": transpose,
    "reshape": reshape,
    "concat_rows": lambda *ts: concat(ts, axis=0),
    "concat": lambda *ts, axis=0: concat(ts, axis=axis),
    "mean_rows": mean_rows,
    "mean": mean,
    "sum_all": sum_all,
    "sum": sum,
    "dot": dot,
    "l2_norm": l2_norm,
    "sigmoid": sigmoid,
    "relu": relu,
    "softmax_rows": softmax_rows,
    "log": log,
    "exp": exp,
    "max_zero": max_zero,
    "clamp": clamp,
    "maximum": maximum,
    "embedding": embedding,
    "neg": neg,
    "softmax": softmax,
    "detach": detach,
}


def apply(op_kind: str, *operands, **kwargs) -> Tensor:
    """Apply an operator by name, e.g. ``apply("matmul", a, b)``."""
    try:
        fn = OPS[op_kind]
    except KeyError:
        raise ContractError(f"unknown operator {op_kind!r}") from None
    return fn(*operands, **kwargs)
