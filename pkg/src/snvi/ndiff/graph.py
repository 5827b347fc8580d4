"""Reverse-mode automatic differentiation on numpy arrays.

Graphs are built define-by-run: every operation on a ``Node`` records the
local vector-Jacobian rule, and ``backward`` replays the rules in reverse
topological order. Every public op also accepts plain numpy arrays, in
which case it computes the value without recording anything. Model code
is therefore written once and serves both the training path (gradients
needed) and the much hotter evaluation path (potentials, MCMC, SIR),
where graph bookkeeping would only burn time.

All values are 64-bit floats; importance weights downstream span hundreds
of orders of magnitude and survive only in float64 log-space.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _expit


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation precondition was violated."""


def _asarray(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    ``parents`` holds the Node operands only; ``vjp`` maps the adjoint of
    this node to a tuple of parent adjoints aligned with ``parents``.
    Leaves have an empty parent tuple. ``param`` links a leaf back to the
    ``Parameter`` it was created from so gradients can be collected by
    identity even when the same parameter enters a graph several times.
    """

    __slots__ = ("value", "parents", "vjp", "requires_grad", "param")
    __array_ufunc__ = None  # keep numpy from absorbing us in mixed ops

    def __init__(self, value, parents=(), vjp=None, requires_grad=None, param=None):
        self.value = _asarray(value)
        self.parents = parents
        self.vjp = vjp
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return take(self, key)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def is_node(x) -> bool:
    return isinstance(x, Node)


def value_of(x) -> np.ndarray:
    """Underlying numpy array of a Node or array-like."""
    return x.value if isinstance(x, Node) else _asarray(x)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def variable(x) -> Node:
    """Leaf node that participates in gradients (inputs under test)."""
    return Node(x, requires_grad=True)


def stop_gradient(x):
    """Pass the value through, contribute nothing to any gradient.

    Idempotent: stop_gradient(stop_gradient(x)) is equivalent to a single
    application in both value and gradient.
    """
    if isinstance(x, Node):
        return Node(x.value, requires_grad=False)
    return x


# ---------------------------------------------------------------------------
# broadcasting helpers

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    if g.shape != shape:
        g = g.reshape(shape)
    return g


def _expand_reduced(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


# ---------------------------------------------------------------------------
# elementwise binary ops

def add(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.add(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = av + bv
    if an and bn:
        def vjp(g):
            return _unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(g, bv.shape),))


def sub(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.subtract(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = av - bv
    if an and bn:
        def vjp(g):
            return _unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(-g, bv.shape),))


def mul(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.multiply(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = av * bv
    if an and bn:
        def vjp(g):
            return _unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g * bv, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(g * av, bv.shape),))


def div(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.divide(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = av / bv
    if an and bn:
        def vjp(g):
            return (_unbroadcast(g / bv, av.shape),
                    _unbroadcast(-g * av / (bv * bv), bv.shape))
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g / bv, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(-g * av / (bv * bv), bv.shape),))


def maximum(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.maximum(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = np.maximum(av, bv)
    amask = av >= bv  # ties route to the first operand
    if an and bn:
        def vjp(g):
            return (_unbroadcast(g * amask, av.shape),
                    _unbroadcast(g * (~amask), bv.shape))
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g * amask, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(g * (~amask), bv.shape),))


def minimum(a, b):
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.minimum(_asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = np.minimum(av, bv)
    amask = av <= bv
    if an and bn:
        def vjp(g):
            return (_unbroadcast(g * amask, av.shape),
                    _unbroadcast(g * (~amask), bv.shape))
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g * amask, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(g * (~amask), bv.shape),))


def clip(x, lo, hi):
    return minimum(maximum(x, lo), hi)


# ---------------------------------------------------------------------------
# elementwise unary ops

def neg(x):
    if not is_node(x):
        return -_asarray(x)
    return Node(-x.value, (x,), lambda g: (-g,))


def power(x, p):
    """x**p for a constant scalar exponent p."""
    if not is_node(x):
        return _asarray(x) ** p
    xv = x.value
    out = xv ** p
    return Node(out, (x,), lambda g: (g * p * xv ** (p - 1),))


def square(x):
    if not is_node(x):
        xv = _asarray(x)
        return xv * xv
    xv = x.value
    return Node(xv * xv, (x,), lambda g: (g * 2.0 * xv,))


def sqrt(x):
    if not is_node(x):
        return np.sqrt(_asarray(x))
    out = np.sqrt(x.value)
    return Node(out, (x,), lambda g: (g * 0.5 / out,))


def exp(x):
    if not is_node(x):
        return np.exp(_asarray(x))
    out = np.exp(x.value)
    return Node(out, (x,), lambda g: (g * out,))


def log(x):
    if not is_node(x):
        with np.errstate(divide="ignore"):
            return np.log(_asarray(x))
    xv = x.value
    with np.errstate(divide="ignore"):
        out = np.log(xv)
    return Node(out, (x,), lambda g: (g / xv,))


def tanh(x):
    if not is_node(x):
        return np.tanh(_asarray(x))
    out = np.tanh(x.value)
    return Node(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    if not is_node(x):
        return _expit(_asarray(x))
    out = _expit(x.value)
    return Node(out, (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x):
    """log(1 + exp(x)), stable for large |x|."""
    if not is_node(x):
        return np.logaddexp(0.0, _asarray(x))
    xv = x.value
    out = np.logaddexp(0.0, xv)
    return Node(out, (x,), lambda g: (g * _expit(xv),))


def relu(x):
    return maximum(x, 0.0)


# ---------------------------------------------------------------------------
# linear algebra and reductions

def matmul(a, b):
    an, bn = is_node(a), is_node(b)
    av, bv = value_of(a), value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(
            f"matmul expects compatible 2-d operands, got {av.shape} @ {bv.shape}"
        )
    if not (an or bn):
        return av @ bv
    out = av @ bv
    if an and bn:
        def vjp(g):
            return g @ bv.T, av.T @ g
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (g @ bv.T,))
    return Node(out, (b,), lambda g: (av.T @ g,))


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy naming
    if not is_node(x):
        return np.sum(_asarray(x), axis=axis, keepdims=keepdims)
    xv = x.value
    out = np.sum(xv, axis=axis, keepdims=keepdims)
    return Node(out, (x,),
                lambda g: (_expand_reduced(np.asarray(g), xv.shape, axis, keepdims),))


def mean(x, axis=None, keepdims=False):
    if not is_node(x):
        return np.mean(_asarray(x), axis=axis, keepdims=keepdims)
    xv = x.value
    out = np.mean(xv, axis=axis, keepdims=keepdims)
    scale = xv.size / out.size if hasattr(out, "size") else xv.size

    def vjp(g):
        return (_expand_reduced(np.asarray(g), xv.shape, axis, keepdims) / scale,)

    return Node(out, (x,), vjp)


def _logsumexp_value(xv, axis):
    m = np.max(xv, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(invalid="ignore"):
        e = np.exp(xv - m_safe)
    s = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(s)
    return out, e, s


def logsumexp(x, axis=-1, keepdims=False):
    """Max-shifted log-sum-exp; rows of all -inf yield -inf, not nan."""
    if not is_node(x):
        out, _, _ = _logsumexp_value(_asarray(x), axis)
        return out if keepdims else np.squeeze(out, axis=axis)
    xv = x.value
    out, e, s = _logsumexp_value(xv, axis)
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def vjp(g):
        gg = np.asarray(g)
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        with np.errstate(invalid="ignore"):
            sm = np.where(s > 0, e / s, 0.0)
        return (gg * sm,)

    return Node(out, (x,), vjp)


def softmax(x, axis=-1):
    """exp(x - logsumexp(x)) along ``axis``."""
    return exp(sub(x, logsumexp(x, axis=axis, keepdims=True)))


# ---------------------------------------------------------------------------
# structural ops

def take(x, key):
    """Basic slicing/indexing. Integer-array indexing is not supported
    here (it can repeat elements); use ``gather`` for that."""
    if not is_node(x):
        return _asarray(x)[key]
    xv = x.value
    out = xv[key]

    def vjp(g):
        gx = np.zeros_like(xv)
        gx[key] = g
        return (gx,)

    return Node(out, (x,), vjp)


def gather(x, idx):
    """take_along_axis on the last axis; idx is a constant integer array."""
    idx = np.asarray(idx)
    if not is_node(x):
        return np.take_along_axis(_asarray(x), idx, axis=-1)
    xv = x.value
    out = np.take_along_axis(xv, idx, axis=-1)

    def vjp(g):
        gx = np.zeros_like(xv)
        grids = list(np.ogrid[tuple(slice(s) for s in idx.shape)])
        grids[-1] = idx
        np.add.at(gx, tuple(grids), g)
        return (gx,)

    return Node(out, (x,), vjp)


def where(cond, a, b):
    """Select by a constant boolean mask (cond never carries gradient)."""
    cond = np.asarray(cond, dtype=bool)
    an, bn = is_node(a), is_node(b)
    if not (an or bn):
        return np.where(cond, _asarray(a), _asarray(b))
    av, bv = value_of(a), value_of(b)
    out = np.where(cond, av, bv)
    if an and bn:
        def vjp(g):
            return (_unbroadcast(g * cond, av.shape),
                    _unbroadcast(g * (~cond), bv.shape))
        return Node(out, (a, b), vjp)
    if an:
        return Node(out, (a,), lambda g: (_unbroadcast(g * cond, av.shape),))
    return Node(out, (b,), lambda g: (_unbroadcast(g * (~cond), bv.shape),))


def concat(xs, axis=-1):
    if not any(is_node(x) for x in xs):
        return np.concatenate([_asarray(x) for x in xs], axis=axis)
    vals = [value_of(x) for x in xs]
    out = np.concatenate(vals, axis=axis)
    nodes = [(i, x) for i, x in enumerate(xs) if is_node(x)]
    sizes = [v.shape[axis] for v in vals]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(g):
        grads = []
        for i, _ in nodes:
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(g[tuple(sl)])
        return tuple(grads)

    return Node(out, tuple(x for _, x in nodes), vjp)


def reshape(x, shape):
    if not is_node(x):
        return _asarray(x).reshape(shape)
    xv = x.value
    return Node(xv.reshape(shape), (x,), lambda g: (g.reshape(xv.shape),))


def cumsum(x, axis=-1):
    if not is_node(x):
        return np.cumsum(_asarray(x), axis=axis)
    out = np.cumsum(x.value, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return Node(out, (x,), vjp)


# ---------------------------------------------------------------------------
# backward pass

def backward(root: Node, wrt=()):
    """Adjoints of a scalar ``root`` with respect to every reachable leaf.

    Returns ``(param_grads, wrt_grads)``: gradients keyed by Parameter
    object for every parameter leaf in the graph, and a list of gradients
    aligned with ``wrt`` (zeros where a node is unreachable). Adjoints of
    shared subexpressions accumulate additively, once per node.
    """
    if not isinstance(root, Node):
        raise ContractError("backward expects a graph Node as root")
    if root.value.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.value.shape}")

    topo = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    adjoint = {id(root): np.ones_like(root.value)}
    param_grads: dict = {}
    for node in reversed(topo):
        g = adjoint.get(id(node))
        if g is None:
            continue
        if node.param is not None:
            prev = param_grads.get(node.param)
            param_grads[node.param] = g if prev is None else prev + g
        if node.vjp is None:
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            prev = adjoint.get(pid)
            adjoint[pid] = pg if prev is None else prev + pg

    wrt_grads = [adjoint.get(id(n), np.zeros_like(n.value)) for n in wrt]
    return param_grads, wrt_grads
