"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every operation creates a ``Node`` holding its forward value, references to
its operand nodes and the data needed to push adjoints back to them.  Nodes
are created strictly after their operands, so creation order is a topological
order of the DAG; ``backward`` recovers it with an iterative DFS from the
root, which keeps the engine free of global mutable state (independent graphs
can be built and differentiated concurrently).

Gradients flow only into leaves created with ``requires_grad=True``.  Each
node caches whether such a leaf is reachable from it, so backward skips dead
subgraphs entirely.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = [
    "Node",
    "OP_KINDS",
    "leaf",
    "apply",
    "backward",
    "reset_adjoints",
    "toposort",
    "add",
    "sub",
    "mul",
    "div",
    "matmul",
    "tanh",
    "sin",
    "cos",
    "exp",
    "powi",
    "absval",
    "square",
    "reduce_sum",
    "reduce_mean",
    "broadcast_to",
    "one_minus_sq",
    "scaled_mul",
    "quadmix",
]

OP_KINDS = frozenset(
    {
        "leaf",
        "add",
        "sub",
        "mul",
        "div",
        "matmul",
        "tanh",
        "sin",
        "cos",
        "exp",
        "pow",
        "abs",
        "square",
        "sum",
        "mean",
        "broadcast",
        "one_minus_sq",
        "scaled_mul",
        "quadmix",
    }
)

# Optional per-op output validation; the always-on checks live at leaf
# creation and at the scalar reductions, which any loss pipeline crosses.
_CHECK_FINITE = os.environ.get("ADVPINN_CHECK_FINITE", "") not in ("", "0")


class Node:
    """One recorded computation step: value, operands and adjoint slot."""

    __slots__ = ("op", "value", "parents", "requires_grad", "_adjoint", "ctx")

    def __init__(self, op, value, parents=(), requires_grad=False, ctx=None):
        self.op = op
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad
        self._adjoint = None
        self.ctx = ctx

    @property
    def shape(self):
        return self.value.shape

    @property
    def adjoint(self):
        """Accumulated adjoint, materialized as zeros until backward fills it."""
        if self._adjoint is None:
            self._adjoint = np.zeros_like(self.value)
        return self._adjoint

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # arithmetic sugar; floats/arrays are wrapped as constant leaves
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __pow__(self, k):
        return powi(self, k)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)


def _wrap(x):
    if isinstance(x, Node):
        return x
    return leaf(x)


def leaf(value, requires_grad=False):
    """Create a leaf node from array-like data.

    Raises ValueError on non-finite entries; the engine never lets NaN/Inf
    enter a graph silently.
    """
    arr = np.asarray(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("leaf value contains non-finite entries")
    return Node("leaf", arr, (), bool(requires_grad))


def _maybe_check(node):
    if _CHECK_FINITE and not np.all(np.isfinite(node.value)):
        raise FloatingPointError(f"non-finite output from op {node.op!r}")
    return node


def _elementwise_shapes(a, b, op):
    """Validate elementwise operand shapes; returns True if they differ.

    Equal shapes or numpy-style broadcasting where one operand is a scalar
    or a degenerate (1-extent) axis of the other is accepted.
    """
    sa, sb = a.value.shape, b.value.shape
    if sa == sb:
        return False
    try:
        out = np.broadcast_shapes(sa, sb)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}") from None
    if out != sa and out != sb:
        raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")
    return True


def _reduce_to(grad, shape):
    """Sum gradient over axes that were broadcast to reach ``grad.shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    bc = _elementwise_shapes(a, b, "add")
    rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("add", a.value + b.value, (a, b), rg, bc))


def sub(a, b):
    bc = _elementwise_shapes(a, b, "sub")
    rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("sub", a.value - b.value, (a, b), rg, bc))


def mul(a, b):
    bc = _elementwise_shapes(a, b, "mul")
    rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("mul", a.value * b.value, (a, b), rg, bc))


def div(a, b):
    bc = _elementwise_shapes(a, b, "div")
    rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("div", a.value / b.value, (a, b), rg, bc))


def matmul(a, b):
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ValueError("matmul requires 2-D operands")
    if a.value.shape[1] != b.value.shape[0]:
        raise ValueError(
            f"matmul: inner extents differ {a.value.shape} @ {b.value.shape}"
        )
    rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("matmul", a.value @ b.value, (a, b), rg))


def tanh(a):
    return _maybe_check(Node("tanh", np.tanh(a.value), (a,), a.requires_grad))


def sin(a):
    return _maybe_check(Node("sin", np.sin(a.value), (a,), a.requires_grad))


def cos(a):
    return _maybe_check(Node("cos", np.cos(a.value), (a,), a.requires_grad))


def exp(a):
    return _maybe_check(Node("exp", np.exp(a.value), (a,), a.requires_grad))


def powi(a, k):
    """Integer power, differentiated as k*x**(k-1)."""
    if not isinstance(k, (int, np.integer)):
        raise TypeError("powi exponent must be an integer")
    return _maybe_check(Node("pow", a.value ** int(k), (a,), a.requires_grad, int(k)))


def absval(a):
    """Absolute value with subgradient 0 at exactly 0 (sign convention)."""
    return _maybe_check(Node("abs", np.abs(a.value), (a,), a.requires_grad))


def square(a):
    return _maybe_check(Node("square", a.value * a.value, (a,), a.requires_grad))


def _check_scalar_finite(node):
    if not np.all(np.isfinite(node.value)):
        raise FloatingPointError(f"non-finite value reached reduction {node.op!r}")
    return node


def reduce_sum(a):
    return _check_scalar_finite(Node("sum", np.sum(a.value), (a,), a.requires_grad))


def reduce_mean(a):
    return _check_scalar_finite(Node("mean", np.mean(a.value), (a,), a.requires_grad))


def broadcast_to(a, shape):
    shape = tuple(shape)
    val = np.broadcast_to(a.value, shape).copy()
    return Node("broadcast", val, (a,), a.requires_grad, a.value.shape)


def one_minus_sq(a):
    """1 - x^2 as a single op (derivative of tanh given its value)."""
    return _maybe_check(
        Node("one_minus_sq", 1.0 - a.value * a.value, (a,), a.requires_grad)
    )


def scaled_mul(a, b, c):
    """c * a * b for a float constant c, fused into one op."""
    c = float(c)
    rg = a.requires_grad or b.requires_grad
    if a.value.shape != b.value.shape:
        raise ValueError("scaled_mul requires equal shapes")
    return _maybe_check(Node("scaled_mul", c * (a.value * b.value), (a, b), rg, c))


def quadmix(a, b, c=None, d=None):
    """a*b^2 (+ c*d when given), the second-derivative chain combiner."""
    if (c is None) != (d is None):
        raise ValueError("quadmix needs both or neither of c, d")
    if a.value.shape != b.value.shape:
        raise ValueError("quadmix requires equal shapes")
    val = a.value * (b.value * b.value)
    if c is not None:
        if c.value.shape != d.value.shape:
            raise ValueError("quadmix requires equal shapes")
        val += c.value * d.value
        parents = (a, b, c, d)
        rg = (
            a.requires_grad or b.requires_grad
            or c.requires_grad or d.requires_grad
        )
    else:
        parents = (a, b)
        rg = a.requires_grad or b.requires_grad
    return _maybe_check(Node("quadmix", val, parents, rg))


_UNARY = {
    "tanh": tanh,
    "sin": sin,
    "cos": cos,
    "exp": exp,
    "abs": absval,
    "square": square,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "one_minus_sq": one_minus_sq,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "matmul": matmul}


def apply(op_kind, *operands, **kwargs):
    """Generic op application by kind; see module ops for semantics."""
    if op_kind in _BINARY:
        if len(operands) != 2:
            raise ValueError(f"{op_kind} expects 2 operands")
        return _BINARY[op_kind](*operands)
    if op_kind in _UNARY:
        if len(operands) != 1:
            raise ValueError(f"{op_kind} expects 1 operand")
        return _UNARY[op_kind](*operands)
    if op_kind == "pow":
        (a,) = operands
        return powi(a, kwargs["exponent"])
    if op_kind == "broadcast":
        (a,) = operands
        return broadcast_to(a, kwargs["shape"])
    if op_kind == "scaled_mul":
        a, b = operands
        return scaled_mul(a, b, kwargs["scale"])
    if op_kind == "quadmix":
        return quadmix(*operands)
    raise ValueError(f"unsupported op_kind {op_kind!r}")


def toposort(root):
    """Nodes feeding ``root`` (inclusive) in topological order, leaves first.

    Only the gradient-relevant subgraph is visited: children whose subtree
    contains no requires_grad leaf are skipped.
    """
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        nid = id(node)
        if nid in visited:
            continue
        visited.add(nid)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def _accumulate(parent, grad, own):
    # ``own`` marks a freshly allocated gradient safe to store by reference.
    if parent._adjoint is None:
        parent._adjoint = grad if own else grad.copy()
    else:
        parent._adjoint += grad


def _push(node):
    g = node._adjoint
    op = node.op
    ps = node.parents
    if op == "add":
        a, b = ps
        if node.ctx:  # broadcasting happened
            if a.requires_grad:
                _accumulate(a, _reduce_to(g, a.value.shape), False)
            if b.requires_grad:
                _accumulate(b, _reduce_to(g, b.value.shape), False)
        else:
            if a.requires_grad:
                _accumulate(a, g, False)
            if b.requires_grad:
                _accumulate(b, g, False)
    elif op == "mul":
        a, b = ps
        if a.requires_grad:
            ga = g * b.value
            _accumulate(a, ga if not node.ctx else _reduce_to(ga, a.value.shape), True)
        if b.requires_grad:
            gb = g * a.value
            _accumulate(b, gb if not node.ctx else _reduce_to(gb, b.value.shape), True)
    elif op == "matmul":
        a, b = ps
        if a.requires_grad:
            _accumulate(a, g @ b.value.T, True)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g, True)
    elif op == "sub":
        a, b = ps
        if a.requires_grad:
            _accumulate(a, g if not node.ctx else _reduce_to(g, a.value.shape), False)
        if b.requires_grad:
            gb = -g
            _accumulate(b, gb if not node.ctx else _reduce_to(gb, b.value.shape), True)
    elif op == "tanh":
        (a,) = ps
        _accumulate(a, g * (1.0 - node.value * node.value), True)
    elif op == "square":
        (a,) = ps
        _accumulate(a, g * (2.0 * a.value), True)
    elif op == "div":
        a, b = ps
        if a.requires_grad:
            ga = g / b.value
            _accumulate(a, ga if not node.ctx else _reduce_to(ga, a.value.shape), True)
        if b.requires_grad:
            gb = -g * node.value / b.value
            _accumulate(b, gb if not node.ctx else _reduce_to(gb, b.value.shape), True)
    elif op == "exp":
        (a,) = ps
        _accumulate(a, g * node.value, True)
    elif op == "sin":
        (a,) = ps
        _accumulate(a, g * np.cos(a.value), True)
    elif op == "cos":
        (a,) = ps
        _accumulate(a, -g * np.sin(a.value), True)
    elif op == "pow":
        (a,) = ps
        k = node.ctx
        if k == 0:
            _accumulate(a, np.zeros_like(a.value), True)
        else:
            _accumulate(a, g * (k * a.value ** (k - 1)), True)
    elif op == "abs":
        (a,) = ps
        _accumulate(a, g * np.sign(a.value), True)
    elif op == "one_minus_sq":
        (a,) = ps
        _accumulate(a, g * (-2.0 * a.value), True)
    elif op == "scaled_mul":
        a, b = ps
        c = node.ctx
        if a.requires_grad:
            _accumulate(a, g * (c * b.value), True)
        if b.requires_grad:
            _accumulate(b, g * (c * a.value), True)
    elif op == "quadmix":
        if len(ps) == 2:
            a, b = ps
            c = d = None
        else:
            a, b, c, d = ps
        if a.requires_grad:
            _accumulate(a, g * (b.value * b.value), True)
        if b.requires_grad:
            _accumulate(b, g * (2.0 * a.value * b.value), True)
        if c is not None:
            if c.requires_grad:
                _accumulate(c, g * d.value, True)
            if d.requires_grad:
                _accumulate(d, g * c.value, True)
    elif op == "sum":
        (a,) = ps
        _accumulate(a, np.broadcast_to(g, a.value.shape), False)
    elif op == "mean":
        (a,) = ps
        _accumulate(a, np.broadcast_to(g / a.value.size, a.value.shape), False)
    elif op == "broadcast":
        (a,) = ps
        _accumulate(a, _reduce_to(g, node.ctx), False)
    else:  # pragma: no cover - construction guarantees known ops
        raise AssertionError(f"no backward rule for op {node.op!r}")


def backward(root, free_memory=False):
    """Propagate adjoints from a scalar-shaped root to requires_grad leaves.

    After the call every reachable requires_grad leaf's ``adjoint`` holds
    d(root)/d(leaf); untouched leaves keep a zero adjoint.  With
    ``free_memory`` intermediate values and adjoints are dropped as soon as
    they were consumed (the graph is not reusable afterwards); the default
    leaves the graph intact so backward can be repeated after
    ``reset_adjoints``.
    """
    if root.value.size != 1:
        raise ValueError("backward root must be scalar-shaped (single element)")
    if not np.all(np.isfinite(root.value)):
        raise FloatingPointError("backward root is non-finite")
    order = toposort(root)
    root._adjoint = np.ones_like(root.value)
    for node in reversed(order):
        if node._adjoint is None or node.op == "leaf":
            continue
        _push(node)
        if free_memory:
            node._adjoint = None
            node.value = None
    if free_memory:
        root.value = None


def reset_adjoints(root):
    """Zero out adjoints on the graph under ``root`` so backward can rerun."""
    for node in toposort(root):
        node._adjoint = None
