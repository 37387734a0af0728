"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

Every computation builds a fresh tape of :class:`Node` objects; calling
:func:`backward` on a scalar node walks the tape once in reverse topological
order and accumulates gradients into the leaves that require them.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NumericError

LAYER_NORM_EPS = 1e-5
DTYPE = np.float64


class Node:
    """One value on the tape together with the closure that back-propagates into it."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "op", "requires_grad")
    __array_priority__ = 100  # make ndarray <op> Node dispatch to Node

    def __init__(self, value, requires_grad=False, op="leaf", parents=(), backward_fn=None):
        self.value = np.asarray(value, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op}, shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return slice_(self, index)


def param(value) -> Node:
    """Leaf node that receives a gradient."""
    return Node(np.array(value, dtype=DTYPE), requires_grad=True)


def const(value) -> Node:
    return Node(value)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else Node(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else np.asarray(x, dtype=DTYPE)


def _result(value, op, parents, backward_fn) -> Node:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite output from op '{op}'")
    if any(p.requires_grad for p in parents):
        return Node(value, True, op, parents, backward_fn)
    return Node(value, False, op)


def unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` undoing numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast shapes {shapes}") from exc


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return _result(a.value + b.value, "add", (a, b), bw)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def bw(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return _result(a.value - b.value, "sub", (a, b), bw)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("mul", a.shape, b.shape)
    av, bv = a.value, b.value

    def bw(g):
        ga = unbroadcast(g * bv, av.shape) if a.requires_grad else None
        gb = unbroadcast(g * av, bv.shape) if b.requires_grad else None
        return ga, gb

    return _result(av * bv, "mul", (a, b), bw)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _broadcast_shape("div", a.shape, b.shape)
    if np.any(b.value == 0):
        raise DomainError("div: division by zero")
    av, bv = a.value, b.value
    out = av / bv

    def bw(g):
        ga = unbroadcast(g / bv, av.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / bv, bv.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), bw)


def neg(a) -> Node:
    a = as_node(a)
    return _result(-a.value, "neg", (a,), lambda g: (-g,))


def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0  # gradient at exactly 0 is 0
    return _result(np.where(mask, a.value, 0.0), "relu", (a,), lambda g: (g * mask,))


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Node:
    a = as_node(a)
    out = _sigmoid_np(a.value)
    return _result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Node:
    a = as_node(a)
    out = np.tanh(a.value)
    return _result(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def exp(a) -> Node:
    a = as_node(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("log of nonpositive value")
    av = a.value
    return _result(np.log(av), "log", (a,), lambda g: (g / av,))


def sin(a) -> Node:
    a = as_node(a)
    av = a.value
    return _result(np.sin(av), "sin", (a,), lambda g: (g * np.cos(av),))


def square(a) -> Node:
    a = as_node(a)
    av = a.value
    return _result(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def sqrt(a) -> Node:
    a = as_node(a)
    if np.any(a.value <= 0):
        raise DomainError("sqrt of nonpositive value")
    out = np.sqrt(a.value)
    return _result(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.value.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _result(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    if count == 0:
        raise DimensionError("mean over an empty axis")
    return sum_(a, axis, keepdims) * (1.0 / count)


def softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (a,), bw)


def log_softmax(a, axis=-1) -> Node:
    a = as_node(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def bw(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _result(out, "log_softmax", (a,), bw)


def layer_norm(a, eps=LAYER_NORM_EPS) -> Node:
    """Normalize over the last axis (no affine part)."""
    a = as_node(a)
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return _result(xhat, "layer_norm", (a,), bw)


def l2_norm_rows(a) -> Node:
    """Euclidean norm over the last axis. The gradient at a zero vector is taken as 0."""
    a = as_node(a)
    x = a.value
    out = np.sqrt((x * x).sum(axis=-1))

    def bw(g):
        safe = np.where(out > 0, out, 1.0)
        scale = np.where(out > 0, g / safe, 0.0)
        return (x * scale[..., None],)

    return _result(out, "l2_norm_rows", (a,), bw)


# ---------------------------------------------------------------- structural


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[-2 if bv.ndim > 1 else 0]:
        raise DimensionError(f"matmul: incompatible shapes {av.shape} @ {bv.shape}")
    out = av @ bv

    def bw(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape).reshape(av.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape).reshape(bv.shape)
        return ga, gb

    return _result(out, "matmul", (a, b), bw)


def masked_matmul(x, w, mask) -> Node:
    """``x @ (w * mask)`` with a constant 0/1 mask, as used by MADE layers."""
    x, w = as_node(x), as_node(w)
    mask = np.asarray(mask, dtype=DTYPE)
    if mask.shape != w.shape:
        raise DimensionError(f"masked_matmul: mask {mask.shape} vs weight {w.shape}")
    if x.shape[-1] != w.shape[0]:
        raise DimensionError(f"masked_matmul: incompatible shapes {x.shape} @ {w.shape}")
    wm = w.value * mask
    xv = x.value

    def bw(g):
        gx = g @ wm.T if x.requires_grad else None
        gw = (xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])) * mask if w.requires_grad else None
        return gx, gw

    return _result(xv @ wm, "masked_matmul", (x, w), bw)


def concat(nodes: Sequence, axis=-1) -> Node:
    nodes = [as_node(n) for n in nodes]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}") from exc
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result(out, "concat", tuple(nodes), bw)


def slice_(a, index) -> Node:
    a = as_node(a)
    shape = a.shape
    try:
        out = a.value[index]
    except IndexError as exc:
        raise DimensionError(f"slice: {exc}") from exc

    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _result(np.array(out, dtype=DTYPE), "slice", (a,), bw)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def broadcast(a, shape) -> Node:
    a = as_node(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape)
    except ValueError as exc:
        raise DimensionError(f"broadcast: {src} -> {shape}") from exc
    return _result(np.array(out), "broadcast", (a,), lambda g: (unbroadcast(g, src),))


def reshape(a, shape) -> Node:
    a = as_node(a)
    src = a.shape
    try:
        out = a.value.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {src} -> {shape}") from exc
    return _result(out, "reshape", (a,), lambda g: (g.reshape(src),))


def gather_rows(a, idx) -> Node:
    """Select rows ``a[idx]`` along axis 0; repeated indices accumulate on backward."""
    a = as_node(a)
    idx = np.asarray(idx, dtype=np.intp)
    n = a.shape[0]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"gather_rows: index out of range for {n} rows")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _result(a.value[idx], "gather_rows", (a,), bw)


OPS: dict[str, Callable[..., Node]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "sum": sum_,
    "mean": mean,
    "relu": relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "sin": sin,
    "square": square,
    "sqrt": sqrt,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "layer_norm": layer_norm,
    "concat": lambda *nodes, axis=-1: concat(nodes, axis=axis),
    "slice": slice_,
    "broadcast": broadcast,
    "reshape": reshape,
    "masked_matmul": masked_matmul,
    "gather_rows": gather_rows,
    "l2_norm_rows": l2_norm_rows,
}


def forward_op(kind: str, inputs: Sequence, **attrs) -> Node:
    """Apply the op registered under ``kind`` to ``inputs``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind '{kind}'") from None
    return fn(*inputs, **attrs)


# ---------------------------------------------------------------- backward


def _topological_order(root: Node) -> list[Node]:
    order: list[Node] = []
    seen: set[int] = set()
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node, params: Iterable[Node] | None = None) -> dict[Node, np.ndarray]:
    """Back-propagate from scalar ``root``.

    Returns a map from every reachable leaf requiring grad to its gradient.
    When ``params`` is given, the map holds exactly those nodes, with zero
    gradients for any that ``root`` does not depend on.
    """
    if root.value.size != 1:
        raise ContractError(f"backward requires a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.value)}
    leaves: dict[Node, np.ndarray] = {}
    if root.requires_grad:
        for node in reversed(_topological_order(root)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g
                leaves[node] = g
                continue
            for p, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                prev = grads.get(key)
                grads[key] = pg if prev is None else prev + pg
    if params is None:
        return leaves
    return {p: leaves.get(p, np.zeros_like(p.value)) for p in params}


def grad(f: Callable[[Node], Node], x) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x``."""
    xn = param(x)
    return backward(f(xn), [xn])[xn]


def jacobian(f: Callable[[Node], Node], x) -> np.ndarray:
    """Dense Jacobian of a vector-valued ``f`` by one backward pass per output."""
    x = np.asarray(x, dtype=DTYPE)
    xn = param(x)
    out = f(xn)
    flat = reshape(out, (-1,))
    rows = []
    for i in range(flat.shape[0]):
        rows.append(backward(flat[i], [xn])[xn].ravel())
    return np.array(rows).reshape(out.shape + x.shape)


def finite_diff_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x = np.array(x, dtype=DTYPE)
    try:
        analytic = grad(f, x)
    except NumericError as exc:
        raise DomainError(f"finite_diff_check: {exc}") from exc
    numeric = np.zeros_like(x)
    flat = x.reshape(-1)

    def evaluate():
        try:
            return float(f(Node(x)).value)
        except NumericError:
            return np.nan

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = evaluate()
        flat[i] = orig - step
        fm = evaluate()
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise DomainError("finite_diff_check: non-finite function value")
        numeric.reshape(-1)[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0
