"""Minimal reverse-mode automatic differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array; scalars are ``(1, 1)``. Broadcasting is
limited to adding/multiplying by a row vector ``(1, m)``, a column vector
``(n, 1)`` or a scalar ``(1, 1)``.

    >>> x = leaf([[3.0, 4.0]])
    >>> grads = backward(sqnorm(x))
    >>> grads[x]
    array([[6., 8.]])
"""
from __future__ import annotations

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Node:
    """A value on the graph together with how it was produced."""

    __slots__ = ("value", "op", "parents", "vjp", "requires_grad", "grad", "name")

    def __init__(self, value, op="leaf", parents=(), vjp=None, requires_grad=False, name=None):
        self.value = value
        self.op = op
        self.parents = tuple(parents)
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node({self.op}{label}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    @property
    def T(self):
        return transpose(self)


def _as2d(value):
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got {arr.ndim}")
    return arr


def leaf(value, requires_grad=True, name=None):
    """A differentiable input (a parameter)."""
    return Node(_as2d(value), requires_grad=requires_grad, name=name)


def const(value, name=None):
    """A non-differentiable input."""
    return Node(_as2d(value), op="const", name=name)


def _node(x):
    return x if isinstance(x, Node) else const(x)


def _make(op, value, parents, vjp):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"op '{op}' produced a non-finite value")
    req = any(p.requires_grad for p in parents)
    return Node(value, op=op, parents=parents, vjp=vjp if req else None, requires_grad=req)


def _broadcast_shape(op, a, b):
    (n1, m1), (n2, m2) = a, b
    if n1 != n2 and 1 not in (n1, n2) or m1 != m2 and 1 not in (m1, m2):
        raise ShapeError(f"op '{op}': shapes {a} and {b} do not conform")
    return max(n1, n2), max(m1, m2)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


# ---------------------------------------------------------------- binary ops

def add(a, b):
    a, b = _node(a), _node(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("add", a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = _node(a), _node(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape
    return _make("sub", a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b):
    a, b = _node(a), _node(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value
    return _make("mul", av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b):
    a, b = _node(a), _node(b)
    _broadcast_shape("div", a.shape, b.shape)
    av, bv = a.value, b.value
    out = av / bv

    def vjp(g):
        ga = g / bv
        return _unbroadcast(ga, av.shape), _unbroadcast(-ga * out, bv.shape)

    return _make("div", out, (a, b), vjp)


def matmul(a, b):
    a, b = _node(a), _node(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"op 'matmul': shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return _make("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


# ----------------------------------------------------------------- unary ops

def neg(x):
    x = _node(x)
    return _make("neg", -x.value, (x,), lambda g: (-g,))


def transpose(x):
    x = _node(x)
    return _make("transpose", x.value.T.copy(), (x,), lambda g: (g.T,))


def relu(x):
    x = _node(x)
    mask = x.value > 0
    return _make("relu", np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,))


def tanh(x):
    x = _node(x)
    out = np.tanh(x.value)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    x = _node(x)
    v = x.value
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))
    return _make("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x):
    x = _node(x)
    out = np.exp(x.value)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x, eps=LOG_EPS):
    """Natural log with the input clamped below at ``eps``."""
    x = _node(x)
    clamped = np.maximum(x.value, eps)
    live = x.value > eps
    return _make("log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def power(x, p):
    x = _node(x)
    p = float(p)
    v = x.value
    return _make("power", v ** p, (x,), lambda g: (g * p * v ** (p - 1.0),))


def absolute(x):
    x = _node(x)
    v = x.value
    return _make("abs", np.abs(v), (x,), lambda g: (g * np.sign(v),))


def softmax(x):
    """Row-wise softmax with max subtraction."""
    x = _node(x)
    z = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _make("softmax", out, (x,), vjp)


def detach(x):
    """Same value, no gradient path back to ``x``."""
    x = _node(x)
    return Node(x.value.copy(), op="detach")


# ------------------------------------------------------------- reductions

def sum(x, axis=None):  # noqa: A001 - mirrors numpy naming
    x = _node(x)
    shape = x.shape
    if axis is None:
        return _make("sum", np.array([[x.value.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))
    out = x.value.sum(axis=axis, keepdims=True)
    return _make("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x, axis=None):
    x = _node(x)
    count = x.value.size if axis is None else x.shape[axis]
    return sum(x, axis) * (1.0 / count)


def sqnorm(x, axis=None):
    """Squared L2 (Frobenius) norm, whole matrix or along ``axis``."""
    x = _node(x)
    v = x.value
    if axis is None:
        out = np.array([[np.sum(v * v)]])
        return _make("sqnorm", out, (x,), lambda g: (2.0 * g[0, 0] * v,))
    out = np.sum(v * v, axis=axis, keepdims=True)
    return _make("sqnorm", out, (x,), lambda g: (2.0 * g * v,))


def norm(x, axis=None):
    """L2 norm; the subgradient at zero is taken to be zero."""
    x = _node(x)
    v = x.value
    if axis is None:
        r = np.sqrt(np.sum(v * v))
        out = np.array([[r]])
        return _make("norm", out, (x,), lambda g: (g[0, 0] * v / r if r > 0 else np.zeros_like(v),))
    r = np.sqrt(np.sum(v * v, axis=axis, keepdims=True))
    safe = np.where(r > 0, r, 1.0)
    return _make("norm", r, (x,), lambda g: (np.where(r > 0, g / safe, 0.0) * v,))


# ------------------------------------------------------------- indexing

def columns(x, idx):
    """Select columns ``idx`` (an int, list or slice) of every row."""
    x = _node(x)
    if isinstance(idx, (int, np.integer)):
        idx = [int(idx)]
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[:, idx] += g
        return (full,)

    return _make("columns", x.value[:, idx].copy(), (x,), vjp)


def gather(x, idx):
    """Pick one column per row: out[i, 0] = x[i, idx[i]]."""
    x = _node(x)
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (x.shape[0],):
        raise ShapeError(f"op 'gather': index shape {idx.shape} for value {x.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, idx] = g[:, 0]
        return (full,)

    return _make("gather", x.value[rows, idx][:, None], (x,), vjp)


def concat(nodes, axis=1):
    nodes = [_node(n) for n in nodes]
    other = 1 - axis
    if len({n.shape[other] for n in nodes}) != 1:
        raise ShapeError("op 'concat': mismatched shapes " + str([n.shape for n in nodes]))
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make("concat", np.concatenate([n.value for n in nodes], axis=axis), tuple(nodes), vjp)


# ------------------------------------------------------------- backward

class Tape:
    """Nodes reachable from ``root`` in topological order (parents first)."""

    def __init__(self, root):
        self.root = root
        self.nodes = self._toposort(root)

    @staticmethod
    def _toposort(root):
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def leaves(self):
        return [n for n in self.nodes if not n.parents and n.requires_grad]


def backward(root):
    """Accumulate d(root)/d(node) into ``.grad``; return ``{leaf: grad}``."""
    if root.shape != (1, 1):
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    tape = Tape(root)
    for n in tape.nodes:
        n.grad = np.zeros_like(n.value)
    root.grad = np.ones((1, 1))
    for n in reversed(tape.nodes):
        if n.vjp is None:
            continue
        for p, gp in zip(n.parents, n.vjp(n.grad)):
            if p.requires_grad:
                p.grad = p.grad + gp
    return {leaf_: leaf_.grad for leaf_ in tape.leaves()}


def finite_difference_grad(f, params, h=1e-4):
    """Central-difference gradient of scalar ``f(params)`` for a dict of arrays.

    ``params`` maps names to float arrays; each coordinate is perturbed in
    turn and restored afterwards.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    grads = {}
    for key, arr in params.items():
        g = np.zeros_like(arr, dtype=np.float64)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(params))
            flat[i] = orig - h
            fm = float(f(params))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[key] = g
    return grads
