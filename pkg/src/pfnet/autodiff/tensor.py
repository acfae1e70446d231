"""Dense float64 tensors with a define-by-run reverse-mode tape."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "matmul", "add", "sub", "mul", "neg", "relu",
    "square", "sin", "cos", "concat", "index_select", "scatter_add", "sum", "mean",
    "spmm", "dropout", "reshape", "take", "no_grad", "grad_enabled",
]


class ShapeError(ValueError):
    pass


class Tensor:
    """A float64 array that remembers how it was computed.

    Leaves with ``requires_grad`` accumulate ``grad`` across backward passes
    until :meth:`zero_grad`. Intermediate gradients are not retained.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "vjp", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, parents=(), vjp=None, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.vjp = vjp
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        Tape.from_output(self).run(self)

    __add__ = lambda self, other: add(self, other)
    __radd__ = lambda self, other: add(other, self)
    __sub__ = lambda self, other: sub(self, other)
    __rsub__ = lambda self, other: sub(other, self)
    __mul__ = lambda self, other: mul(self, other)
    __rmul__ = lambda self, other: mul(other, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, other: matmul(self, other)
    __getitem__ = lambda self, key: take(self, key)


def tensor(data, requires_grad=False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Record nothing inside the block, so intermediates are freed as soon as they die."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def _make(data, parents, vjp, op) -> Tensor:
    if not (_GRAD_ENABLED and any(p.requires_grad for p in parents)):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, vjp=vjp, op=op)


class Tape:
    """Operations reachable from an output, parents before children."""

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "Tape":
        order, seen = [], set()
        stack = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def run(self, out: Tensor):
        grads = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node.parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


# --------------------------------------------------------------------------
# broadcasting: identical shapes, scalars, or a trailing row vector

def _check_broadcast(a, b, op):
    sa, sb = a.shape, b.shape
    if sa == sb or a.size == 1 or b.size == 1:
        return np.broadcast_shapes(sa, sb)
    if a.ndim == 2 and b.ndim == 1 and sa[1] == sb[0]:
        return sa
    if b.ndim == 2 and a.ndim == 1 and sb[1] == sa[0]:
        return sb
    if a.ndim == 2 and b.ndim == 2 and sa[1] == sb[1] and 1 in (sa[0], sb[0]):
        return np.broadcast_shapes(sa, sb)
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# primitives

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def neg(a) -> Tensor:
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def relu(a) -> Tensor:
    a = _wrap(a)
    out = np.maximum(a.data, 0.0)
    return _make(out, (a,), lambda g: (g * (out > 0),), "relu")


def square(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sin(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make(np.sin(ad), (a,), lambda g: (g * np.cos(ad),), "sin")


def cos(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _make(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),), "cos")


def concat(tensors, axis=-1) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    if len({t.ndim for t in ts}) != 1:
        raise ShapeError(f"concat: mixed ranks {[t.shape for t in ts]}")
    ax = axis % ts[0].ndim
    lead = {t.shape[:ax] + t.shape[ax + 1:] for t in ts}
    if len(lead) != 1:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def vjp(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=ax) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(np.concatenate([t.data for t in ts], axis=ax), tuple(ts), vjp, "concat")


def _segment_sum(values, index, n_rows):
    m = sp.csr_matrix((np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index)))
    return m @ values


def index_select(a, index) -> Tensor:
    """Gather rows: ``out[e] = a[index[e]]``."""
    a = _wrap(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    return _make(np.take(a.data, index, axis=0), (a,), lambda g: (_segment_sum(g, index, n),),
                 "index_select")


def scatter_add(src, index, n_rows) -> Tensor:
    """Row-indexed accumulation: ``out[index[e]] += src[e]``."""
    src = _wrap(src)
    index = np.asarray(index, dtype=np.int64)
    if src.shape[0] != len(index):
        raise ShapeError(f"scatter_add: {src.shape[0]} rows but {len(index)} indices")
    return _make(_segment_sum(src.data, index, n_rows), (src,), lambda g: (g[index],), "scatter_add")


def sum(a, axis=None) -> Tensor:  # noqa: A001
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.data.sum(axis=axis), (a,), vjp, "sum")


def mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    count = a.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


def spmm(S, a) -> Tensor:
    """Constant sparse matrix times dense tensor."""
    a = _wrap(a)
    if S.shape[1] != a.shape[0]:
        raise ShapeError(f"spmm: incompatible shapes {S.shape} and {a.shape}")
    return _make(S @ a.data, (a,), lambda g: (S.T @ g,), "spmm")


def dropout(a, p, train, rng) -> Tensor:
    """Inverted dropout; the identity when not training or ``p == 0``."""
    a = _wrap(a)
    if not train or p == 0:
        return a
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    keep = (rng.random(a.shape) >= p) / (1.0 - p)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def take(a, key) -> Tensor:
    """Basic/advanced indexing (used for column selection)."""
    a = _wrap(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)

    return _make(a.data[key], (a,), vjp, "take")
