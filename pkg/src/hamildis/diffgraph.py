"""Reverse-mode differentiation on a recorded tape, with support for
gradients of gradients.

Every node holds a float64 numpy array (a 0-d array is a plain scalar).
Nodes are appended to a :class:`Tape` in creation order, so the tape is
already topologically sorted and the backward pass is a single reversed
sweep.  With ``create_graph=True`` the backward sweep is itself recorded,
which is what lets a loss built from input-gradients of a network be
differentiated again with respect to the network weights.

Only the broadcasting numpy does for elementwise binary ops is supported;
matrix products are strictly 2-D.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GraphError",
    "DomainError",
    "Tape",
    "Node",
    "grad",
    "finite_difference_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "tanh",
    "elu",
    "square",
    "matmul",
    "affine",
    "dot",
    "transpose",
    "sum",
    "mean",
    "reshape",
    "broadcast_to",
    "sum_to",
    "getitem",
    "concat",
]


class GraphError(Exception):
    """Raised when nodes from different tapes are combined."""


class DomainError(ValueError):
    """Raised when an op is evaluated outside its domain."""


class Tape:
    """Append-only record of nodes.

    A tape must not be mutated from more than one thread.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def variable(self, value) -> "Node":
        return Node(self, _as_array(value), requires_grad=True)

    def constant(self, value) -> "Node":
        return Node(self, _as_array(value), requires_grad=False)


class Node:
    __slots__ = ("tape", "value", "index", "op", "parents", "ctx", "requires_grad")
    __array_ufunc__ = None  # make ndarray <op> Node defer to Node

    def __init__(self, tape, value, requires_grad=False, op=None, parents=(), ctx=None):
        self.tape = tape
        self.value = value
        self.op = op
        self.parents = parents
        self.ctx = ctx
        self.requires_grad = requires_grad
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    @property
    def is_leaf(self) -> bool:
        return self.op is None

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        kind = self.op.name if self.op else ("var" if self.requires_grad else "const")
        return f"Node({kind}, shape={self.value.shape}, value={self.value!r})"

    __add__ = lambda self, other: add(self, other)  # noqa: E731
    __radd__ = lambda self, other: add(other, self)  # noqa: E731
    __sub__ = lambda self, other: sub(self, other)  # noqa: E731
    __rsub__ = lambda self, other: sub(other, self)  # noqa: E731
    __mul__ = lambda self, other: mul(self, other)  # noqa: E731
    __rmul__ = lambda self, other: mul(other, self)  # noqa: E731
    __truediv__ = lambda self, other: div(self, other)  # noqa: E731
    __rtruediv__ = lambda self, other: div(other, self)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __matmul__ = lambda self, other: matmul(self, other)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731

    @property
    def T(self):
        return transpose(self)


def _as_array(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("non-finite input value")
    return arr


class _Op:
    __slots__ = ("name", "vjp")

    def __init__(self, name: str, vjp: Callable):
        self.name = name
        self.vjp = vjp


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Node):
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise GraphError("operands belong to different tapes")
    return tape


def _lift(tape: Tape, a) -> Node:
    return a if isinstance(a, Node) else tape.constant(a)


def _record(op: _Op, tape: Tape, parents: tuple, value: np.ndarray, ctx=None) -> Node:
    if not np.all(np.isfinite(value)):
        raise OverflowError(f"{op.name} produced a non-finite value")
    rg = any(p.requires_grad for p in parents)
    return Node(tape, value, requires_grad=rg, op=op, parents=parents, ctx=ctx)


def _val(a):
    return a.value if isinstance(a, Node) else a


def _apply(op: _Op, fwd: Callable, args: tuple, ctx=None):
    """Run ``fwd`` on raw values; record a node if any argument is a Node."""
    tape = _tape_of(args)
    with np.errstate(over="ignore", invalid="ignore"):
        value = fwd(*[_val(a) for a in args])
    if tape is None:
        if not np.all(np.isfinite(value)):
            raise OverflowError(f"{op.name} produced a non-finite value")
        return value
    parents = tuple(_lift(tape, a) for a in args)
    return _record(op, tape, parents, np.asarray(value, dtype=np.float64), ctx)


# --- vector-jacobian products ------------------------------------------------
# Each rule receives (g, parents, out, ctx) where g/parents/out are raw arrays
# for first-order passes and Nodes when the backward pass is being recorded.


def _shape(a):
    return a.value.shape if isinstance(a, Node) else np.shape(a)


def _vjp_add(g, parents, out, ctx):
    a, b = parents
    return sum_to(g, _shape(a)), sum_to(g, _shape(b))


def _vjp_sub(g, parents, out, ctx):
    a, b = parents
    return sum_to(g, _shape(a)), sum_to(neg(g), _shape(b))


def _vjp_mul(g, parents, out, ctx):
    a, b = parents
    return sum_to(mul(g, b), _shape(a)), sum_to(mul(g, a), _shape(b))


def _vjp_div(g, parents, out, ctx):
    a, b = parents
    ga = div(g, b)
    gb = neg(mul(ga, out))
    return sum_to(ga, _shape(a)), sum_to(gb, _shape(b))


def _vjp_neg(g, parents, out, ctx):
    return (neg(g),)


def _vjp_exp(g, parents, out, ctx):
    return (mul(g, out),)


def _vjp_log(g, parents, out, ctx):
    return (div(g, parents[0]),)


def _vjp_tanh(g, parents, out, ctx):
    return (mul(g, sub(1.0, mul(out, out))),)


def _vjp_elu(g, parents, out, ctx):
    # ctx is the (x <= 0) mask; on that side d/dx = exp(x) = out + 1
    return (mul(g, add(1.0, mul(ctx, out))),)


def _vjp_square(g, parents, out, ctx):
    return (mul(g, mul(2.0, parents[0])),)


def _vjp_matmul(g, parents, out, ctx):
    a, b = parents
    return matmul(g, transpose(b)), matmul(transpose(a), g)


def _vjp_transpose(g, parents, out, ctx):
    return (transpose(g),)


def _vjp_sum(g, parents, out, ctx):
    in_shape, kept_shape = ctx
    return (broadcast_to(reshape(g, kept_shape), in_shape),)


def _vjp_reshape(g, parents, out, ctx):
    return (reshape(g, _shape(parents[0])),)


def _vjp_broadcast(g, parents, out, ctx):
    return (sum_to(g, _shape(parents[0])),)


def _vjp_sum_to(g, parents, out, ctx):
    return (broadcast_to(g, _shape(parents[0])),)


def _vjp_getitem(g, parents, out, ctx):
    return (_scatter(g, ctx, _shape(parents[0])),)


def _vjp_scatter(g, parents, out, ctx):
    idx, _ = ctx
    return (getitem(g, idx),)


def _vjp_concat(g, parents, out, ctx):
    axis, sizes = ctx
    grads, start = [], 0
    for n in sizes:
        idx = [slice(None)] * len(_shape(g))
        idx[axis] = slice(start, start + n)
        grads.append(getitem(g, tuple(idx)))
        start += n
    return tuple(grads)


_ADD = _Op("add", _vjp_add)
_SUB = _Op("sub", _vjp_sub)
_MUL = _Op("mul", _vjp_mul)
_DIV = _Op("div", _vjp_div)
_NEG = _Op("neg", _vjp_neg)
_EXP = _Op("exp", _vjp_exp)
_LOG = _Op("log", _vjp_log)
_TANH = _Op("tanh", _vjp_tanh)
_ELU = _Op("elu", _vjp_elu)
_SQUARE = _Op("square", _vjp_square)
_MATMUL = _Op("matmul", _vjp_matmul)
_TRANSPOSE = _Op("transpose", _vjp_transpose)
_SUM = _Op("sum", _vjp_sum)
_RESHAPE = _Op("reshape", _vjp_reshape)
_BROADCAST = _Op("broadcast_to", _vjp_broadcast)
_SUM_TO = _Op("sum_to", _vjp_sum_to)
_GETITEM = _Op("getitem", _vjp_getitem)
_SCATTER = _Op("scatter", _vjp_scatter)
_CONCAT = _Op("concat", _vjp_concat)


# --- public ops ---------------------------------------------------------------


def add(a, b):
    return _apply(_ADD, np.add, (a, b))


def sub(a, b):
    return _apply(_SUB, np.subtract, (a, b))


def mul(a, b):
    return _apply(_MUL, np.multiply, (a, b))


def div(a, b):
    if np.any(_val(b) == 0):
        raise ZeroDivisionError("division by zero")
    return _apply(_DIV, np.divide, (a, b))


def neg(a):
    return _apply(_NEG, np.negative, (a,))


def exp(a):
    return _apply(_EXP, np.exp, (a,))


def log(a):
    if np.any(np.asarray(_val(a)) <= 0):
        raise DomainError("log of a non-positive value")
    return _apply(_LOG, np.log, (a,))


def tanh(a):
    return _apply(_TANH, np.tanh, (a,))


def elu(a):
    """ELU with alpha = 1: x for x > 0, exp(x) - 1 otherwise."""
    x = np.asarray(_val(a))
    mask = (x <= 0).astype(np.float64)
    return _apply(_ELU, lambda v: np.where(v > 0, v, np.expm1(np.minimum(v, 0.0))), (a,), ctx=mask)


def square(a):
    return _apply(_SQUARE, np.square, (a,))


def matmul(a, b):
    if np.ndim(_val(a)) != 2 or np.ndim(_val(b)) != 2:
        raise ValueError("matmul expects 2-D operands")
    return _apply(_MATMUL, np.matmul, (a, b))


def transpose(a):
    return _apply(_TRANSPOSE, np.transpose, (a,))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    shape = _shape(a)
    kept = np.sum(np.zeros(shape), axis=axis, keepdims=True).shape
    return _apply(_SUM, lambda v: np.sum(v, axis=axis, keepdims=keepdims), (a,), ctx=(shape, kept))


def mean(a, axis=None, keepdims=False):
    shape = _shape(a)
    count = int(np.prod(shape)) if axis is None else shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def reshape(a, shape):
    return _apply(_RESHAPE, lambda v: np.reshape(v, shape), (a,))


def broadcast_to(a, shape):
    if tuple(_shape(a)) == tuple(shape):
        return a
    return _apply(_BROADCAST, lambda v: np.array(np.broadcast_to(v, shape)), (a,))


def sum_to(a, shape):
    """Reduce ``a`` by summation until it has ``shape`` (undoes broadcasting)."""
    shape = tuple(shape)
    if tuple(_shape(a)) == shape:
        return a

    def fwd(v):
        lead = v.ndim - len(shape)
        axes = tuple(range(lead)) + tuple(
            i + lead for i, n in enumerate(shape) if n == 1 and v.shape[i + lead] != 1
        )
        return np.sum(v, axis=axes, keepdims=True).reshape(shape)

    return _apply(_SUM_TO, fwd, (a,))


def getitem(a, idx):
    return _apply(_GETITEM, lambda v: np.array(v[idx]), (a,), ctx=idx)


def _scatter(g, idx, shape):
    def fwd(v):
        out = np.zeros(shape)
        out[idx] = v
        return out

    return _apply(_SCATTER, fwd, (g,), ctx=(idx, shape))


def concat(parts: Sequence, axis: int = -1):
    ndim = len(_shape(parts[0]))
    axis = axis % ndim
    sizes = tuple(_shape(p)[axis] for p in parts)
    return _apply(_CONCAT, lambda *vs: np.concatenate(vs, axis=axis), tuple(parts), ctx=(axis, sizes))


def dot(a, b):
    """Inner product of two equal-length vectors."""
    return sum(mul(a, b))


def affine(x, weight, bias):
    """``x @ weight + bias`` for a batch ``x`` of shape (n, fan_in)."""
    return add(matmul(x, weight), bias)


# --- differentiation ----------------------------------------------------------


def grad(output: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradient of a single-element ``output`` with respect to each of ``wrt``.

    With ``create_graph`` the returned nodes are recorded on the tape and can
    be differentiated again.  Inputs that ``output`` does not depend on get an
    exact zero gradient.
    """
    if not isinstance(output, Node):
        raise TypeError("output must be a Node")
    if output.value.size != 1:
        raise ValueError("output must hold a single element")
    tape = output.tape
    for w in wrt:
        if not isinstance(w, Node) or w.tape is not tape:
            raise GraphError("gradient requested for a node on another tape")

    adj: dict[int, object] = {}
    seed = np.ones_like(output.value)
    adj[output.index] = tape.constant(seed) if create_graph else seed
    wanted = {w.index for w in wrt}
    lowest = min(wanted, default=output.index)

    nodes = tape.nodes
    for i in range(output.index, lowest - 1, -1):
        g = adj.get(i)
        if g is None:
            continue
        node = nodes[i]
        if node.op is None or not node.requires_grad:
            continue
        if i not in wanted:
            del adj[i]
        if create_graph:
            grads = node.op.vjp(g, node.parents, node, node.ctx)
        else:
            grads = node.op.vjp(g, tuple(p.value for p in node.parents), node.value, node.ctx)
        for parent, pg in zip(node.parents, grads):
            if not parent.requires_grad:
                continue
            prev = adj.get(parent.index)
            adj[parent.index] = pg if prev is None else add(prev, pg)

    result = []
    for w in wrt:
        g = adj.get(w.index)
        if g is None:
            result.append(tape.constant(np.zeros_like(w.value)))
        elif isinstance(g, Node):
            result.append(g)
        else:
            result.append(tape.constant(g))
    return result


def finite_difference_check(f: Callable[[list], float], point: Sequence[float], step: float = 1e-5) -> list[float]:
    """Central-difference gradient of a scalar function of a list of reals."""
    if step <= 0:
        raise ValueError("step must be positive")
    point = [float(x) for x in point]
    out = []
    for i in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[i] += step
        lo[i] -= step
        out.append((float(f(hi)) - float(f(lo))) / (2.0 * step))
    return out
