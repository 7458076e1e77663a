"""Reverse-mode gradient engine over float64 numpy arrays.

Implements only the operations the recommender needs: dense and sparse
matrix products, broadcast elementwise arithmetic, exp/log, row
gather/slice/concat, L2 row normalization, masked row-wise log-sum-exp
and reductions.  Every operation validates its output for finiteness and
aborts with the operation name on NaN/Inf.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

__all__ = [
    "NumericsError",
    "Tensor",
    "parameter",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "exp",
    "log",
    "leaky_relu",
    "sum_axis",
    "mean_all",
    "gather_rows",
    "slice_rows",
    "concat_rows",
    "spmm",
    "l2_normalize_rows",
    "logsumexp_rows",
    "backward",
    "grad_of",
    "zero_grad",
]


class NumericsError(RuntimeError):
    """Raised when an operation produces a non-finite intermediate."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_finite(data: np.ndarray, op: str):
    if not np.all(np.isfinite(data)):
        raise NumericsError(f"non-finite intermediate produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to `shape`, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


class Tensor:
    """Array node in the computation graph.

    `trainable` marks optimizer-owned leaves; interior nodes carry a
    backward closure that accumulates into their parents' `.grad`.
    """

    __slots__ = ("data", "grad", "trainable", "name", "_parents", "_backward", "_op", "_needs")

    def __init__(self, data, trainable: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self.trainable = bool(trainable)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._op = "leaf"
        self._needs = self.trainable

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or self._op
        return f"Tensor({tag}, shape={self.data.shape}, trainable={self.trainable})"

    # arithmetic sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __neg__(self):
        return neg(self)

    @property
    def T(self):
        return transpose(self)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, trainable=True, name=name)


def constant(data, name: str | None = None) -> Tensor:
    return Tensor(data, trainable=False, name=name)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, op: str, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    out._op = op
    _check_finite(out.data, op)
    if any(p._needs for p in parents):
        out._parents = parents
        out._backward = backward_fn
        out._needs = True
    return out


def _accum(t: Tensor, g: np.ndarray):
    if not t._needs:
        return
    t.grad = g if t.grad is None else t.grad + g


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, "sub", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, "div", (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, -g)

    return _make(-a.data, "neg", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def transpose(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g.T)

    return _make(a.data.T, "transpose", (a,), bw)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def bw(g):
        _accum(a, g * data)

    return _make(data, "exp", (a,), bw)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def bw(g):
        _accum(a, g / a.data)

    return _make(data, "log", (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0

    def bw(g):
        _accum(a, g * np.where(pos, 1.0, slope))

    return _make(np.where(pos, a.data, slope * a.data), "leaky_relu", (a,), bw)


def sum_axis(a: Tensor, axis: int | None = None, keepdims: bool = True) -> Tensor:
    def bw(g):
        _accum(a, np.broadcast_to(np.reshape(g, g_shape), a.data.shape).copy())

    data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        g_shape = (1,) * a.data.ndim
    else:
        g_shape = list(a.data.shape)
        g_shape[axis] = 1
        g_shape = tuple(g_shape)
    return _make(data, "sum", (a,), bw)


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        _accum(a, np.broadcast_to(g / n, a.data.shape).copy())

    return _make(a.data.mean(), "mean", (a,), bw)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        ga = np.zeros_like(a.data)
        np.add.at(ga, idx, g)
        _accum(a, ga)

    return _make(a.data[idx], "gather_rows", (a,), bw)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def bw(g):
        ga = np.zeros_like(a.data)
        ga[start:stop] = g
        _accum(a, ga)

    return _make(a.data[start:stop].copy(), "slice_rows", (a,), bw)


def concat_rows(parts: list[Tensor]) -> Tensor:
    offsets = np.cumsum([0] + [p.data.shape[0] for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accum(p, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), "concat_rows", tuple(parts), bw)


def spmm(s: sp.spmatrix, a: Tensor) -> Tensor:
    """Constant sparse matrix times tensor; gradient flows through `a` only."""
    st = s.T

    def bw(g):
        _accum(a, np.asarray(st @ g))

    return _make(np.asarray(s @ a.data), "spmm", (a,), bw)


def l2_normalize_rows(a: Tensor) -> Tensor:
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    bad = np.nonzero(norms.ravel() == 0.0)[0]
    if bad.size:
        raise NumericsError(f"l2_normalize_rows: zero-norm row(s) {bad[:5].tolist()}")
    data = a.data / norms

    def bw(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        _accum(a, (g - data * inner) / norms)

    return _make(data, "l2_normalize_rows", (a,), bw)


def logsumexp_rows(a: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise log(sum(exp)) over entries where `mask` is nonzero.

    `mask` is a constant 0/1 array of the same shape; None means all
    entries participate.  Every row must keep at least one entry.
    """
    x = a.data
    if mask is None:
        xm = x
    else:
        if mask.shape != x.shape:
            raise ValueError("mask shape mismatch")
        if not (mask != 0).any(axis=1).all():
            raise ValueError("logsumexp_rows: some row has no unmasked entry")
        xm = np.where(mask != 0, x, -np.inf)
    mx = xm.max(axis=1, keepdims=True)
    data = mx + np.log(np.exp(xm - mx).sum(axis=1, keepdims=True))

    def bw(g):
        _accum(a, g * np.exp(xm - data))

    return _make(data, "logsumexp_rows", (a,), bw)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p._needs and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into `.grad` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError("backward requires a scalar loss")
    if not loss._needs:
        return
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_topo_order(loss)):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def grad_of(loss: Tensor, params: list[Tensor]) -> list[np.ndarray]:
    """Run reverse mode from `loss`; return (and store) each parameter's gradient."""
    backward(loss)
    grads = []
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        grads.append(p.grad)
    return grads


def zero_grad(params: list[Tensor]):
    for p in params:
        p.grad = None
