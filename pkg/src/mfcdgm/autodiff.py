"""Minimal reverse-mode differentiation over numpy arrays.

Only what the networks and losses in this package need. A :class:`Var`
records its parents together with a vector-Jacobian product for each; the
graph is walked once in reverse topological order by :func:`backward`.
Input-gradients of a network are themselves built from recorded operations,
so a loss that uses them is differentiated by the same single sweep.
"""
from __future__ import annotations

import numpy as np


class Var:
    __slots__ = ("value", "parents", "grad")

    def __init__(self, value, parents=()):
        self.value = value
        self.parents = parents
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def __repr__(self):
        return f"Var(shape={self.value.shape})"


def _wrap(x):
    return x if isinstance(x, Var) else Var(np.asarray(x, dtype=np.float64))


def _val(x):
    return x.value if isinstance(x, Var) else x


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(k for k, n in enumerate(shape) if n == 1 and g.shape[k] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _node(value, *pairs):
    """Build a Var from ``(input, vjp)`` pairs, skipping constant inputs."""
    parents = tuple((p, f) for p, f in pairs if isinstance(p, Var))
    return Var(value, parents)


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    out = av + bv
    return _node(
        out,
        (a, lambda g: unbroadcast(g, np.shape(av))),
        (b, lambda g: unbroadcast(g, np.shape(bv))),
    )


def neg(a: Var) -> Var:
    return _node(-a.value, (a, lambda g: -g))


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    return _node(
        av * bv,
        (a, lambda g: unbroadcast(g * bv, np.shape(av))),
        (b, lambda g: unbroadcast(g * av, np.shape(bv))),
    )


def matmul(a, b) -> Var:
    """``a @ b`` with ``a`` of shape (B, k) and ``b`` of shape (k, n)."""
    av, bv = _val(a), _val(b)
    return _node(av @ bv, (a, lambda g: g @ bv.T), (b, lambda g: av.T @ g))


def matmul_t(a, b) -> Var:
    """``a @ b.T`` without materializing a transposed node."""
    av, bv = _val(a), _val(b)
    return _node(av @ bv.T, (a, lambda g: g @ bv), (b, lambda g: g.T @ av))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _node(y, (a, lambda g: g * (1.0 - y * y)))


def tanh_slope(y: Var) -> Var:
    """``1 - y**2``: derivative of tanh written in terms of its output."""
    yv = y.value
    return _node(1.0 - yv * yv, (y, lambda g: -2.0 * g * yv))


def square(a: Var) -> Var:
    av = a.value
    return _node(av * av, (a, lambda g: 2.0 * g * av))


def absolute(a: Var) -> Var:
    av = a.value
    return _node(np.abs(av), (a, lambda g: g * np.sign(av)))


def sum_(a: Var, axis=None) -> Var:
    av = a.value
    shape = av.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    return _node(np.sum(av, axis=axis), (a, vjp))


def getitem(a: Var, idx) -> Var:
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        full[idx] = g
        return full

    return _node(av[idx], (a, vjp))


def custom(value, *pairs) -> Var:
    """Node with caller-supplied vector-Jacobian products."""
    return _node(value, *pairs)


def backward(out: Var, seed=None) -> None:
    """Accumulate ``d(seed . out)/dx`` into ``x.grad`` for every ancestor ``x``."""
    order = _toposort(out)
    for v in order:
        v.grad = None
    out.grad = np.ones_like(out.value) if seed is None else np.asarray(seed, dtype=np.float64)
    for v in reversed(order):
        g = v.grad
        if g is None:
            continue
        for parent, vjp in v.parents:
            pg = vjp(g)
            if parent.grad is None:
                parent.grad = pg  # never mutated in place
            else:
                parent.grad = parent.grad + pg
        if v.parents:
            v.grad = None  # free interior buffers early


def _toposort(out: Var) -> list:
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        v, done = stack.pop()
        if done:
            order.append(v)
            continue
        if id(v) in seen:
            continue
        seen.add(id(v))
        stack.append((v, True))
        for p, _ in v.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order
