"""A small reverse-mode tape over numpy arrays.

Only the primitives the encoders and losses need are provided. Each op
records its parents and a closure mapping the output cotangent to parent
cotangents; ``backward`` walks the graph in reverse topological order.
"""
from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .errors import NumericError

_NORM_EPS = 1e-12


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _make(value, parents, backward_fn):
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Var(value)
    return Var(value, parents, backward_fn, requires_grad=True)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Var:
    a, b = const(a), const(b)
    out = a.value + b.value

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def sub(a, b) -> Var:
    a, b = const(a), const(b)
    out = a.value - b.value

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make(out, (a, b), bw)


def mul(a, b) -> Var:
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = (av * bv).astype(np.result_type(av, bv), copy=False)

    def bw(g):
        return _unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)

    return _make(out, (a, b), bw)


def matmul(a, b) -> Var:
    """``a[..., k] @ b[k, m]``; ``b`` must be 2-D."""
    a, b = const(a), const(b)
    av, bv = a.value, b.value
    out = av @ bv

    def bw(g):
        ga = g @ bv.T
        gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(out, (a, b), bw)


def transpose(a) -> Var:
    a = const(a)
    return _make(a.value.T, (a,), lambda g: (g.T,))


def relu(a) -> Var:
    a = const(a)
    out = np.maximum(a.value, 0)
    return _make(out, (a,), lambda g: (g * (out > 0),))


def l2_normalize(a, axis=-1) -> Var:
    """Row normalization; rows with (near) zero norm map to zero."""
    a = const(a)
    norm = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=True))
    safe = norm > _NORM_EPS
    inv = np.where(safe, 1.0 / np.where(safe, norm, 1.0), 0.0).astype(a.value.dtype)
    y = a.value * inv

    def bw(g):
        dot = np.sum(y * g, axis=axis, keepdims=True)
        return ((g - y * dot) * inv,)

    return _make(y, (a,), bw)


def max_axis(a, axis) -> Var:
    """Max along ``axis``; the gradient goes to the first maximizer."""
    a = const(a)
    out = a.value.max(axis=axis, keepdims=True)
    if not a.requires_grad:
        return Var(out.squeeze(axis))
    hit = a.value == out
    if np.any(hit.sum(axis=axis) > 1):
        hit &= np.cumsum(hit, axis=axis) == 1

    def bw(g):
        return (hit * np.expand_dims(g, axis),)

    return _make(out.squeeze(axis), (a,), bw)


def sparsemax_last(z):
    """Row-wise sparsemax of a numpy array along the last axis."""
    z = np.asarray(z)
    work = z.astype(np.float64)
    zs = -np.sort(-work, axis=-1)
    css = np.cumsum(zs, axis=-1)
    k = np.arange(1, z.shape[-1] + 1, dtype=np.float64)
    support = 1.0 + k * zs > css
    k_max = support.sum(axis=-1, keepdims=True)
    tau = (np.take_along_axis(css, k_max - 1, axis=-1) - 1.0) / k_max
    return np.maximum(work - tau, 0.0).astype(z.dtype if z.dtype.kind == "f" else np.float64)


def sparsemax(a) -> Var:
    a = const(a)
    p = sparsemax_last(a.value)
    supp = (p > 0).astype(p.dtype)
    size = supp.sum(axis=-1, keepdims=True)

    def bw(g):
        mean = np.sum(g * supp, axis=-1, keepdims=True) / size
        return (supp * (g - mean),)

    return _make(p, (a,), bw)


def take_rows(table, idx) -> Var:
    """Embedding lookup ``table[idx]``."""
    table = const(table)
    idx = np.asarray(idx)
    out = table.value[idx]

    def bw(g):
        gt = np.zeros_like(table.value)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _make(out, (table,), bw)


def sum_axis(a, axis=None) -> Var:
    a = const(a)
    out = np.sum(a.value, axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.value.dtype),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(a.value.dtype),)

    return _make(np.asarray(out, dtype=a.value.dtype), (a,), bw)


def mean(a) -> Var:
    a = const(a)
    return mul(sum_axis(a), np.asarray(1.0 / a.value.size, dtype=a.value.dtype))


def logsumexp(a, axis=-1, keepdims=False) -> Var:
    a = const(a)
    m = np.max(a.value, axis=axis, keepdims=True)
    e = np.exp(a.value - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.log(s) + m
    if not keepdims:
        out = out.squeeze(axis)
    soft = e / s

    def bw(g):
        return (soft * (g if keepdims else np.expand_dims(g, axis)),)

    return _make(out.astype(a.value.dtype), (a,), bw)


def exp(a) -> Var:
    a = const(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def diag(a) -> Var:
    a = const(a)
    n = min(a.shape)

    def bw(g):
        ga = np.zeros_like(a.value)
        ga[np.arange(n), np.arange(n)] = g
        return (ga,)

    return _make(np.diagonal(a.value).copy(), (a,), bw)


def concat(parts, axis) -> Var:
    parts = [const(p) for p in parts]
    out = np.concatenate([p.value for p in parts], axis=axis)
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(parts), bw)


def backward(root: Var) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    grads = {id(root): np.ones_like(root.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.value.dtype)
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg


def compute_gradients(
    params: Mapping[str, np.ndarray],
    loss_fn: Callable[[dict[str, Var]], Var],
    phase=None,
    step=None,
):
    """Return ``(loss, {name: dloss/dparam})`` for every entry of ``params``.

    ``loss_fn`` receives the parameters wrapped as leaf ``Var`` objects and
    must return a scalar ``Var``.
    """
    leaves = {k: Var(v, requires_grad=True) for k, v in params.items()}
    loss = loss_fn(leaves)
    value = float(np.asarray(loss.value).item())
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}", phase=phase, step=step)
    if loss.requires_grad:
        backward(loss)
    grads = {}
    for k, leaf in leaves.items():
        grads[k] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return value, grads
