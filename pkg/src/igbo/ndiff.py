"""Dense float64 arrays with nested reverse-mode differentiation.

The gradient of an expression is assembled out of the same primitives the
expression was built from, so every reverse pass yields a value that can be
differentiated again. This is what makes gradients-of-gradients (needed when
a loss contains an input gradient inside it) work without a second machinery.

Arrays are plain numpy float64 ndarrays in row-major order. Graph nodes wrap
one array each; an operation returns a raw ndarray when none of its operands
is a node, so untracked code pays no graph overhead.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "NumericalOverflowError",
    "as_array",
    "value",
    "grad",
    "finite_diff",
    "backward",
    "topo_order",
    "add",
    "sub",
    "neg",
    "mul",
    "matmul",
    "transpose",
    "reshape",
    "tanh",
    "logistic",
    "reciprocal",
    "log",
    "square",
    "absval",
    "relu",
    "reduce_sum",
    "mean",
    "broadcast_to",
    "take_rows",
    "pad_rows",
    "stack_rows",
    "dot",
    "matvec",
    "at",
]


class NumericalOverflowError(ArithmeticError):
    """A primitive produced a non-finite value; the message names the primitive."""


def as_array(x) -> np.ndarray:
    """Coerce to a float64 ndarray (no-op for arrays already in that dtype)."""
    if isinstance(x, Node):
        raise TypeError("expected a plain array, got a graph node (use .value)")
    return np.asarray(x, dtype=np.float64)


def value(x) -> np.ndarray:
    """Underlying array of a node, or the coerced array of a plain value."""
    return x.value if isinstance(x, Node) else as_array(x)


class Node:
    """One vertex of the differentiation graph.

    ``parents`` are the operand nodes and ``vjps`` the matching local gradient
    rules (vector-Jacobian products). Parent links form a DAG; replaying the
    rules in reverse topological order reproduces the chain rule exactly.
    Leaves have no parents. The local rules build graph nodes themselves, so
    the output of a reverse pass stays differentiable.
    """

    __slots__ = ("value", "parents", "vjps", "op")

    # keep numpy from elementwise-broadcasting over Node objects
    __array_ufunc__ = None

    def __init__(self, value, parents=(), vjps=(), op="leaf"):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

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

    def __truediv__(self, other):
        return mul(self, reciprocal(other))

    def __rtruediv__(self, other):
        return mul(other, reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


def _check(val: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(val).all():
        raise NumericalOverflowError(f"numerical overflow in '{op}'")
    return val


def _result(op, val, pairs):
    """Build a node from (operand, vjp) pairs, or return raw when untracked."""
    _check(val, op)
    parents = tuple(p for p, _ in pairs if isinstance(p, Node))
    if not parents:
        return val
    vjps = tuple(v for p, v in pairs if isinstance(p, Node))
    return Node(val, parents, vjps, op)


def _unary(op, a, val, make_vjp):
    """Unary op helper; make_vjp(out_node) returns the local rule."""
    _check(val, op)
    if not isinstance(a, Node):
        return val
    node = Node(val, (a,), (), op)
    node.vjps = (make_vjp(node),)
    return node


def _reduce_to(g, shape):
    """Sum g down to `shape` (the inverse of numpy broadcasting)."""
    shape = tuple(shape)
    gshape = value(g).shape
    if gshape == shape:
        return g
    extra = len(gshape) - len(shape)
    if extra > 0:
        g = reduce_sum(g, axis=tuple(range(extra)))
        gshape = value(g).shape
    axes = tuple(i for i, (gs, ts) in enumerate(zip(gshape, shape)) if ts == 1 and gs != 1)
    if axes:
        g = reduce_sum(g, axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic primitives


def add(a, b):
    av, bv = value(a), value(b)
    val = av + bv
    return _result("add", val, [
        (a, lambda g: _reduce_to(g, av.shape)),
        (b, lambda g: _reduce_to(g, bv.shape)),
    ])


def sub(a, b):
    av, bv = value(a), value(b)
    val = av - bv
    return _result("sub", val, [
        (a, lambda g: _reduce_to(g, av.shape)),
        (b, lambda g: _reduce_to(neg(g), bv.shape)),
    ])


def neg(a):
    return _unary("neg", a, -value(a), lambda out: lambda g: neg(g))


def mul(a, b):
    av, bv = value(a), value(b)
    val = av * bv
    return _result("mul", val, [
        (a, lambda g: _reduce_to(mul(g, b), av.shape)),
        (b, lambda g: _reduce_to(mul(g, a), bv.shape)),
    ])


def matmul(a, b):
    av, bv = value(a), value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise ValueError("matmul expects 2-D operands; use dot/matvec wrappers")
    val = av @ bv
    return _result("matmul", val, [
        (a, lambda g: matmul(g, transpose(b))),
        (b, lambda g: matmul(transpose(a), g)),
    ])


def transpose(a):
    av = value(a)
    if av.ndim != 2:
        raise ValueError("transpose expects a 2-D operand")
    return _result("transpose", av.T.copy(), [(a, lambda g: transpose(g))])


def reshape(a, shape):
    av = value(a)
    old = av.shape
    val = av.reshape(shape).copy()
    return _result("reshape", val, [(a, lambda g: reshape(g, old))])


def tanh(a):
    val = np.tanh(value(a))
    return _unary("tanh", a, val, lambda out: lambda g: mul(g, sub(1.0, square(out))))


def logistic(a):
    v = value(a)
    t = np.exp(-np.abs(v))
    val = np.where(v >= 0, 1.0 / (1.0 + t), t / (1.0 + t))
    return _unary("logistic", a, val,
                  lambda out: lambda g: mul(g, mul(out, sub(1.0, out))))


def reciprocal(a):
    val = 1.0 / value(a)
    return _unary("reciprocal", a, val,
                  lambda out: lambda g: neg(mul(g, square(out))))


def log(a):
    val = np.log(value(a))
    return _unary("log", a, val, lambda out: lambda g: mul(g, reciprocal(a)))


def square(a):
    val = value(a) ** 2
    return _unary("square", a, val, lambda out: lambda g: mul(mul(g, 2.0), a))


def absval(a):
    # subgradient 0 at the kink: np.sign(0) == 0
    s = np.sign(value(a))
    val = np.abs(value(a))
    return _unary("absval", a, val, lambda out: lambda g: mul(g, s))


def relu(a):
    v = value(a)
    mask = (v > 0).astype(np.float64)  # subgradient 0 at the kink
    return _unary("relu", a, v * mask, lambda out: lambda g: mul(g, mask))


def reduce_sum(a, axis=None, keepdims=False):
    av = value(a)
    val = np.sum(av, axis=axis, keepdims=keepdims)
    ashape = av.shape

    def vjp(g):
        if axis is None:
            return mul(g, np.ones(ashape))
        if not keepdims:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            kshape = list(ashape)
            for ax in axes:
                kshape[ax] = 1
            g = reshape(g, tuple(kshape))
        return broadcast_to(g, ashape)

    return _result("sum", np.asarray(val, dtype=np.float64), [(a, vjp)])


def mean(a, axis=None):
    av = value(a)
    if axis is None:
        count = av.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([av.shape[ax] for ax in axes]))
    return mul(reduce_sum(a, axis=axis), 1.0 / count)


def broadcast_to(a, shape):
    av = value(a)
    old = av.shape
    val = np.broadcast_to(av, shape).copy()
    return _result("broadcast", val, [(a, lambda g: _reduce_to(g, old))])


def take_rows(a, start, stop):
    """Slice along axis 0; the local rule scatters back into zeros."""
    av = value(a)
    total = av.shape[0]
    val = av[start:stop].copy()
    return _result("take_rows", val, [(a, lambda g: pad_rows(g, start, total))])


def pad_rows(a, start, total):
    """Embed `a` into a zero block of `total` rows starting at `start`."""
    av = value(a)
    k = av.shape[0]
    val = np.zeros((total,) + av.shape[1:], dtype=np.float64)
    val[start:start + k] = av
    return _result("pad_rows", val, [(a, lambda g: take_rows(g, start, start + k))])


def stack_rows(items):
    """Stack equally-shaped values along a new leading axis."""
    vals = [value(x) for x in items]
    val = np.stack(vals)
    elem = vals[0].shape
    pairs = [
        (x, (lambda g, i=i: reshape(take_rows(g, i, i + 1), elem)))
        for i, x in enumerate(items)
    ]
    return _result("stack", val, pairs)


def dot(a, b):
    """Inner product of two 1-D values, as a scalar."""
    n = value(a).shape[0]
    return reshape(matmul(reshape(a, (1, n)), reshape(b, (n, 1))), ())


def matvec(m, v):
    """2-D times 1-D, as a 1-D value."""
    rows, cols = value(m).shape
    return reshape(matmul(m, reshape(v, (cols, 1))), (rows,))


def at(v, i):
    """Scalar element i of a 1-D value."""
    return reshape(take_rows(v, i, i + 1), ())


# ---------------------------------------------------------------------------
# reverse pass


def topo_order(root: Node) -> list:
    """Iterative post-order over parent links: parents precede children."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in seen:
            continue
        seen.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(output: Node, wrt):
    """Adjoints of a scalar `output` with respect to node(s) in `wrt`.

    Returns a node (or list of nodes, matching `wrt`) whose value is the
    gradient and which remains differentiable. One reverse pass, replayed in
    reverse topological order, visiting each reachable node exactly once.
    """
    if not isinstance(output, Node):
        raise TypeError("backward needs a graph node as output")
    if output.value.shape != ():
        raise ValueError("backward expects a scalar output")
    single = isinstance(wrt, Node)
    targets = [wrt] if single else list(wrt)

    adjoints = {id(output): Node(1.0, op="seed")}
    for node in reversed(topo_order(output)):
        g = adjoints.get(id(node))
        if g is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(g)
            pid = id(parent)
            prev = adjoints.get(pid)
            adjoints[pid] = contrib if prev is None else add(prev, contrib)

    out = []
    for t in targets:
        g = adjoints.get(id(t))
        if g is None:
            g = Node(np.zeros(t.value.shape), op="zero-grad")
        out.append(g)
    return out[0] if single else out


def grad(f, atpoint):
    """Gradient of scalar-valued `f` at `atpoint`.

    Plain array in, plain array out; node in, node out (so calls can nest and
    the result can be differentiated again).
    """
    if isinstance(atpoint, Node):
        y = f(atpoint)
        if not isinstance(y, Node):
            return Node(np.zeros(atpoint.value.shape), op="zero-grad")
        return backward(y, atpoint)
    x = Node(as_array(atpoint))
    y = f(x)
    if not isinstance(y, Node):
        return np.zeros_like(as_array(atpoint))
    return backward(y, x).value


def finite_diff(f, atpoint, h=1e-5):
    """Central-difference gradient oracle, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite_diff needs h > 0")
    x = as_array(atpoint).copy()
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    res = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = float(value(f(x.reshape(x.shape))))
        flat[i] = orig - h
        lo = float(value(f(x.reshape(x.shape))))
        flat[i] = orig
        res[i] = (hi - lo) / (2.0 * h)
    return out
