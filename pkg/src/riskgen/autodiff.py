"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

A :class:`Tape` records :class:`Node` objects in creation order, which is a
topological order of the graph; :meth:`Tape.backward` walks it in reverse.
Nodes that do not depend on any ``requires_grad`` leaf carry no backward
closure, so data and frozen parameters cost nothing in the reverse sweep.

Binary elementwise ops broadcast numpy-style within two dimensions; gradients
are summed back to the operand shape.
"""

from typing import Callable, Sequence

import numpy as np

from riskgen import neuralsort
from riskgen.errors import DomainError

DEFAULT_LEAKY_SLOPE = 0.2
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class Node:
    __slots__ = ("value", "_grad", "parents", "vjp", "requires_grad", "tape", "name")

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    def item(self) -> float:
        return float(self.value.reshape(-1)[0])

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Node{tag} shape={self.shape} grad={self.requires_grad}>"


def _as2d(value) -> np.ndarray:
    # no copy for float64 arrays: leaves alias caller data, which must not be
    # mutated while the tape is in use
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(1, -1)
    elif arr.ndim != 2:
        raise DomainError(f"only 2-D values are supported, got ndim={arr.ndim}")
    return arr


class Tape:
    def __init__(self):
        self.nodes = []

    def leaf(self, value, requires_grad=False, name=None) -> Node:
        node = Node(self, _as2d(value), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        return self.leaf(value, requires_grad=False, name=name)

    def param(self, value, name=None) -> Node:
        return self.leaf(value, requires_grad=True, name=name)

    def _record(self, value, parents, vjp) -> Node:
        rg = any(p.requires_grad for p in parents)
        node = Node(self, value, parents, vjp if rg else None, rg)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> None:
        backward(self, root)


def backward(tape: Tape, root: Node) -> None:
    """Accumulate d(root)/d(node) into ``.grad`` of every node on the tape."""
    if root.value.size != 1:
        raise DomainError(f"backward needs a scalar root, got shape {root.shape}")
    for node in tape.nodes:
        node._grad = None
    root._grad = np.ones_like(root.value)
    for node in reversed(tape.nodes):
        if node.vjp is None or node._grad is None:
            continue
        grads = node.vjp(node._grad)
        for parent, g in zip(node.parents, grads):
            if g is None or not parent.requires_grad:
                continue
            if parent._grad is None:
                parent._grad = np.array(g, dtype=np.float64, copy=True)
            else:
                parent._grad += g


def _lift(x, tape) -> Node:
    if isinstance(x, Node):
        return x
    return tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise DomainError("at least one operand must be a Node")


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DomainError(f"shape mismatch: {a.shape} vs {b.shape}") from exc


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b)
    return tape._record(
        a.value + b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def add_bias(x, b) -> Node:
    if b.shape[0] != 1 or b.shape[1] != x.shape[1]:
        raise DomainError(f"bias shape {b.shape} does not match {x.shape}")
    return add(x, b)


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b)
    return tape._record(
        a.value - b.value,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    return tape._record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
    )


def scale(x: Node, c: float) -> Node:
    c = float(c)
    return x.tape._record(x.value * c, (x,), lambda g: (g * c,))


def square(x: Node) -> Node:
    xv = x.value
    return x.tape._record(xv * xv, (x,), lambda g: (2.0 * g * xv,))


def abs(x: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    xv = x.value
    return x.tape._record(np.abs(xv), (x,), lambda g: (g * np.sign(xv),))


def leaky_relu(x: Node, slope: float = DEFAULT_LEAKY_SLOPE) -> Node:
    d = np.where(x.value > 0, 1.0, slope)
    return x.tape._record(x.value * d, (x,), lambda g: (g * d,))


def clip(x: Node, lo: float, hi: float) -> Node:
    """Clamp to [lo, hi]; gradient 1 strictly inside, 0 outside."""
    xv = x.value
    inside = ((xv > lo) & (xv < hi)).astype(float)
    return x.tape._record(np.clip(xv, lo, hi), (x,), lambda g: (g * inside,))


def indicator_leq(x, v) -> Node:
    """1{x <= v} elementwise (broadcast); a constant for differentiation."""
    tape = _tape_of(x, v)
    xv = x.value if isinstance(x, Node) else _as2d(x)
    vv = v.value if isinstance(v, Node) else _as2d(v)
    return tape.constant((xv <= vv).astype(float))


def stop_gradient(x: Node) -> Node:
    return x.tape.constant(x.value)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(a, tape), _lift(b, tape)
    if a.shape[1] != b.shape[0]:
        raise DomainError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        ga = g @ bv.T if a.requires_grad else None
        gb = av.T @ g if b.requires_grad else None
        return ga, gb

    return tape._record(av @ bv, (a, b), vjp)


def transpose(x: Node) -> Node:
    return x.tape._record(x.value.T.copy(), (x,), lambda g: (g.T,))


def reshape(x: Node, shape) -> Node:
    shape = tuple(shape)
    if len(shape) != 2:
        raise DomainError("reshape target must be 2-D")
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise DomainError(f"cannot reshape {x.shape} to {shape}") from exc
    old = x.shape
    return x.tape._record(out, (x,), lambda g: (g.reshape(old),))


def concat(xs: Sequence[Node], axis: int = 0) -> Node:
    xs = list(xs)
    tape = _tape_of(*xs)
    xs = [_lift(x, tape) for x in xs]
    other = 1 - axis
    if len({x.shape[other] for x in xs}) != 1:
        raise DomainError("concat operands disagree on the non-concatenated axis")
    sizes = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, sizes, axis=axis))

    return tape._record(np.concatenate([x.value for x in xs], axis=axis), tuple(xs), vjp)


def take_columns(x: Node, cols) -> Node:
    cols = np.asarray(cols, dtype=np.intp)
    shape = x.shape
    unique = np.unique(cols).size == cols.size
    if not unique:
        # repeated columns accumulate; a one-hot product beats np.add.at
        onehot = np.zeros((cols.size, shape[1]))
        onehot[np.arange(cols.size), cols] = 1.0

    def vjp(g):
        if not unique:
            return (g @ onehot,)
        out = np.zeros(shape)
        out[:, cols] = g
        return (out,)

    return x.tape._record(x.value[:, cols], (x,), vjp)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Node, axis=None) -> Node:  # noqa: A001
    shape = x.shape
    if axis is None:
        out = np.array([[x.value.sum()]])
    else:
        out = x.value.sum(axis=axis, keepdims=True)
    return x.tape._record(out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Node, axis=None) -> Node:
    count = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


# ---------------------------------------------------------------------------
# neural-network pieces


def softmax_rows(x: Node) -> Node:
    z = x.value - x.value.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return x.tape._record(p, (x,), vjp)


def batchnorm(x: Node, gamma: Node, beta: Node, state: dict, train: bool,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Node:
    """Per-feature batch normalisation with affine ``gamma``/``beta``.

    ``state`` holds ``running_mean`` and ``running_var`` (1 x F). Training mode
    normalises with batch statistics and updates ``state`` in place as
    ``running = momentum * running + (1 - momentum) * batch``; evaluation mode
    uses the running statistics.
    """
    xv = x.value
    if gamma.shape != (1, xv.shape[1]) or beta.shape != (1, xv.shape[1]):
        raise DomainError("batchnorm gamma/beta must be 1 x features")
    if train:
        mu = xv.mean(axis=0, keepdims=True)
        var = xv.var(axis=0, keepdims=True)
        state["running_mean"] = momentum * state["running_mean"] + (1 - momentum) * mu
        state["running_var"] = momentum * state["running_var"] + (1 - momentum) * var
    else:
        mu, var = state["running_mean"], state["running_var"]
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mu) * inv
    gv = gamma.value
    out = xhat * gv + beta.value
    m = xv.shape[0]

    def vjp(g):
        ggamma = (g * xhat).sum(axis=0, keepdims=True)
        gbeta = g.sum(axis=0, keepdims=True)
        gxhat = g * gv
        if train:
            gx = inv / m * (m * gxhat - gxhat.sum(axis=0, keepdims=True)
                            - xhat * (gxhat * xhat).sum(axis=0, keepdims=True))
        else:
            gx = gxhat * inv
        return gx, ggamma, gbeta

    return x.tape._record(out, (x, gamma, beta), vjp)


def soft_sort(x: Node, tau: float) -> Node:
    """Row-wise NeuralSort relaxation of descending sort."""
    y, cache = neuralsort.soft_sort_rows(x.value, tau)
    return x.tape._record(y, (x,), lambda g: (neuralsort.soft_sort_rows_backward(cache, g),))


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(build: Callable, inputs: Sequence[np.ndarray], h: float = 1e-5,
               max_coords: int = None, rng: np.random.Generator = None) -> float:
    """Largest relative discrepancy between reverse-mode and central differences.

    ``build(tape, leaves)`` must return a scalar Node. The step for each
    coordinate is ``h * max(1, |x_i|)``. When ``max_coords`` is given, only a
    random subset of that many coordinates per input is probed.
    """
    inputs = [_as2d(x) for x in inputs]
    tape = Tape()
    leaves = [tape.param(x) for x in inputs]
    root = build(tape, leaves)
    tape.backward(root)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def value_at(arrays):
        t = Tape()
        return build(t, [t.param(a) for a in arrays]).item()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for which, x in enumerate(inputs):
        coords = np.arange(x.size)
        if max_coords is not None and x.size > max_coords:
            coords = rng.choice(x.size, size=max_coords, replace=False)
        for flat in coords:
            idx = np.unravel_index(flat, x.shape)
            step = h * max(1.0, float(np.abs(x[idx])))
            plus = [a.copy() for a in inputs]
            minus = [a.copy() for a in inputs]
            plus[which][idx] += step
            minus[which][idx] -= step
            fd = (value_at(plus) - value_at(minus)) / (2.0 * step)
            a = analytic[which][idx]
            worst = max(worst, float(np.abs(a - fd) / max(1.0, np.abs(a), np.abs(fd))))
    return worst
