"""Dynamic computation graph shared by training (reverse-mode AD) and bounding.

Every value carries its feature dimension on the last axis, so the same
expression can be traced on a single vector (verification graphs) or on a
``(batch, dim)`` array (training tapes).  Nodes are appended in execution
order, which is a topological order by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Iterable, Sequence

import numpy as np


class TapeError(RuntimeError):
    """Raised when an expression uses an operation the tape cannot record."""


class ShapeError(ValueError):
    pass


@dataclass
class OpDef:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., list]
    nonlinear: bool = False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _lrelu(x, slope):
    return np.where(x >= 0.0, x, slope * x)


def _linear_vjp(g, vals, out, attrs):
    x, w, b = vals
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return [g @ w, g2.T @ x2, _unbroadcast(g, b.shape)]


def _slice_vjp(g, vals, out, attrs):
    gx = np.zeros_like(vals[0])
    gx[..., attrs["start"]:attrs["stop"]] = g
    return [gx]


def _concat_vjp(g, vals, out, attrs):
    edges = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return [_unbroadcast(part, v.shape) for part, v in zip(np.split(g, edges, axis=-1), vals)]


def _concat_fwd(*vals, **attrs):
    shape = np.broadcast_shapes(*(v.shape[:-1] for v in vals))
    return np.concatenate([np.broadcast_to(v, shape + v.shape[-1:]) for v in vals], axis=-1)


OPS: dict[str, OpDef] = {
    "input": OpDef(lambda: None, lambda g, vals, out, attrs: []),
    "const": OpDef(lambda value: value, lambda g, vals, out, attrs: []),
    "affine": OpDef(
        lambda x, W, b: x @ W.T + b,
        lambda g, vals, out, attrs: [g @ attrs["W"]],
    ),
    "linear": OpDef(lambda x, w, b: x @ w.T + b, _linear_vjp),
    "add": OpDef(
        lambda a, b: a + b,
        lambda g, vals, out, attrs: [_unbroadcast(g, vals[0].shape), _unbroadcast(g, vals[1].shape)],
    ),
    "sub": OpDef(
        lambda a, b: a - b,
        lambda g, vals, out, attrs: [_unbroadcast(g, vals[0].shape), _unbroadcast(-g, vals[1].shape)],
    ),
    "mul": OpDef(
        lambda a, b: a * b,
        lambda g, vals, out, attrs: [
            _unbroadcast(g * vals[1], vals[0].shape),
            _unbroadcast(g * vals[0], vals[1].shape),
        ],
        nonlinear=True,
    ),
    "scale": OpDef(
        lambda x, c: x * c,
        lambda g, vals, out, attrs: [_unbroadcast(g * attrs["c"], vals[0].shape)],
    ),
    "shift": OpDef(
        lambda x, c: x + c,
        lambda g, vals, out, attrs: [_unbroadcast(g, vals[0].shape)],
    ),
    "recip": OpDef(
        lambda x: 1.0 / x,
        lambda g, vals, out, attrs: [-g * out * out],
        nonlinear=True,
    ),
    "sin": OpDef(np.sin, lambda g, vals, out, attrs: [g * np.cos(vals[0])], nonlinear=True),
    "cos": OpDef(np.cos, lambda g, vals, out, attrs: [-g * np.sin(vals[0])], nonlinear=True),
    "tan": OpDef(np.tan, lambda g, vals, out, attrs: [g * (1.0 + out * out)], nonlinear=True),
    "leaky_relu": OpDef(
        lambda x, slope: _lrelu(x, slope),
        lambda g, vals, out, attrs: [g * np.where(vals[0] >= 0.0, 1.0, attrs["slope"])],
        nonlinear=True,
    ),
    "softplus": OpDef(
        lambda x: np.logaddexp(0.0, x),
        lambda g, vals, out, attrs: [g * _sigmoid(vals[0])],
        nonlinear=True,
    ),
    "square": OpDef(
        lambda x: x * x,
        lambda g, vals, out, attrs: [2.0 * g * vals[0]],
        nonlinear=True,
    ),
    "sum": OpDef(
        lambda x: np.sum(x),
        lambda g, vals, out, attrs: [np.full_like(vals[0], g)],
    ),
    "slice": OpDef(lambda x, start, stop: x[..., start:stop], _slice_vjp),
    "concat": OpDef(_concat_fwd, _concat_vjp),
}

# attrs forwarded to the forward function as keyword arguments
_FWD_ATTRS = {
    "const": ("value",),
    "affine": ("W", "b"),
    "scale": ("c",),
    "shift": ("c",),
    "leaky_relu": ("slope",),
    "slice": ("start", "stop"),
}


class Node:
    """A recorded value.  Arithmetic on nodes records further nodes."""

    __slots__ = ("graph", "id", "op", "inputs", "attrs", "value", "step", "name")

    def __init__(self, graph, id, op, inputs, attrs, value, step, name=None):
        self.graph = graph
        self.id = id
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.value = value
        self.step = step
        self.name = name

    @property
    def dim(self) -> int:
        return int(self.value.shape[-1]) if self.value.ndim else 1

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"

    def __array__(self, *args, **kwargs):
        raise TapeError(f"node {self.id} ({self.op}) cannot be converted to a plain array")

    def __array_ufunc__(self, ufunc, method, *args, **kwargs):
        if method != "__call__" or kwargs:
            raise TapeError(f"unregistered primitive {ufunc.__name__}.{method}")
        handler = _UFUNCS.get(ufunc)
        if handler is None:
            raise TapeError(f"unregistered primitive {ufunc.__name__!r}")
        return handler(*args)

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

    def __neg__(self):
        return self.graph.emit("scale", (self,), {"c": -1.0})

    def __pow__(self, p):
        if p == 2:
            return square(self)
        raise TapeError(f"unregistered primitive pow({p})")


class Graph:
    """Append-only tape of nodes.

    ``step`` is stamped onto every node created while it is set; verification
    graphs use it to report which timestep an unverifiable node belongs to.
    """

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.input_ids: list[int] = []
        self.step: int | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def input(self, value, name: str | None = None) -> Node:
        value = np.array(value, dtype=np.float64)
        node = Node(self, len(self.nodes), "input", (), {}, value, self.step, name)
        self.nodes.append(node)
        self.input_ids.append(node.id)
        return node

    def const(self, value) -> Node:
        value = np.array(value, dtype=np.float64)
        node = Node(self, len(self.nodes), "const", (), {"value": value}, value, self.step)
        self.nodes.append(node)
        return node

    def emit(self, op: str, inputs: Sequence[Node], attrs: dict | None = None) -> Node:
        if op not in OPS or op == "input":
            raise TapeError(f"unregistered primitive {op!r}")
        attrs = attrs or {}
        for x in inputs:
            if x.graph is not self:
                raise TapeError("cannot mix nodes from different graphs")
        vals = [x.value for x in inputs]
        value = OPS[op].forward(*vals, **{k: attrs[k] for k in _FWD_ATTRS.get(op, ())})
        value = np.asarray(value, dtype=np.float64)
        node = Node(self, len(self.nodes), op, tuple(x.id for x in inputs), attrs, value, self.step)
        self.nodes.append(node)
        return node

    def evaluate(self, feeds: dict[int, Any], upto: int | None = None) -> list[np.ndarray]:
        """Replay the tape with new input values; returns all node values."""
        stop = len(self.nodes) if upto is None else upto + 1
        vals: list[np.ndarray] = []
        for node in self.nodes[:stop]:
            if node.op == "input":
                vals.append(np.asarray(feeds.get(node.id, node.value), dtype=np.float64))
            else:
                args = [vals[i] for i in node.inputs]
                kw = {k: node.attrs[k] for k in _FWD_ATTRS.get(node.op, ())}
                vals.append(np.asarray(OPS[node.op].forward(*args, **kw), dtype=np.float64))
        return vals

    def backward(self, out: Node, seed=None, visit_log: list | None = None) -> dict[int, np.ndarray]:
        """Reverse-mode sweep from ``out``.  Returns gradients keyed by node id."""
        if seed is None:
            if out.value.size != 1:
                raise TapeError("backward() from a non-scalar node needs an explicit seed")
            seed = np.ones_like(out.value)
        grads: dict[int, np.ndarray] = {out.id: np.asarray(seed, dtype=np.float64)}
        for nid in range(out.id, -1, -1):
            g = grads.get(nid)
            if g is None:
                continue
            node = self.nodes[nid]
            if visit_log is not None:
                visit_log.append(nid)
            if not node.inputs:
                continue
            vals = [self.nodes[i].value for i in node.inputs]
            parts = OPS[node.op].vjp(g, vals, node.value, node.attrs)
            for i, gi in zip(node.inputs, parts):
                if i in grads:
                    grads[i] = grads[i] + gi
                else:
                    grads[i] = gi
        return grads

    def ancestors(self, node_id: int) -> set[int]:
        seen = {node_id}
        stack = [node_id]
        while stack:
            for i in self.nodes[stack.pop()].inputs:
                if i not in seen:
                    seen.add(i)
                    stack.append(i)
        return seen

    def to_json(self) -> str:
        rows = []
        for n in self.nodes:
            row: dict[str, Any] = {"id": n.id, "op": n.op, "inputs": list(n.inputs)}
            const = {k: np.asarray(v).tolist() for k, v in n.attrs.items()}
            if const:
                row["const"] = const
            if n.step is not None:
                row["step"] = n.step
            rows.append(row)
        return json.dumps(rows)


# ---------------------------------------------------------------------------
# Polymorphic primitives: numpy in, numpy out; Node in, Node out.
# ---------------------------------------------------------------------------


def is_node(x) -> bool:
    return isinstance(x, Node)


def _graph_of(*xs) -> Graph:
    for x in xs:
        if isinstance(x, Node):
            return x.graph
    raise TapeError("no node among arguments")


def _const(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def add(a, b):
    if is_node(a) and is_node(b):
        return a.graph.emit("add", (a, b))
    if is_node(a):
        return a.graph.emit("shift", (a,), {"c": _const(b)})
    if is_node(b):
        return b.graph.emit("shift", (b,), {"c": _const(a)})
    return np.add(a, b)


def sub(a, b):
    if is_node(a) and is_node(b):
        return a.graph.emit("sub", (a, b))
    if is_node(a):
        return a.graph.emit("shift", (a,), {"c": -_const(b)})
    if is_node(b):
        neg = b.graph.emit("scale", (b,), {"c": -1.0})
        return b.graph.emit("shift", (neg,), {"c": _const(a)})
    return np.subtract(a, b)


def mul(a, b):
    if is_node(a) and is_node(b):
        return a.graph.emit("mul", (a, b))
    if is_node(a):
        return a.graph.emit("scale", (a,), {"c": _const(b)})
    if is_node(b):
        return b.graph.emit("scale", (b,), {"c": _const(a)})
    return np.multiply(a, b)


def recip(x):
    if is_node(x):
        return x.graph.emit("recip", (x,))
    return 1.0 / np.asarray(x, dtype=np.float64)


def div(a, b):
    if is_node(b):
        return mul(a, recip(b))
    if is_node(a):
        return a.graph.emit("scale", (a,), {"c": 1.0 / _const(b)})
    return np.true_divide(a, b)


def _unary(op, fn):
    def apply(x):
        if is_node(x):
            return x.graph.emit(op, (x,))
        return fn(np.asarray(x, dtype=np.float64))

    apply.__name__ = op
    return apply


sin = _unary("sin", np.sin)
cos = _unary("cos", np.cos)
tan = _unary("tan", np.tan)
softplus = _unary("softplus", lambda x: np.logaddexp(0.0, x))
square = _unary("square", lambda x: x * x)


def leaky_relu(x, slope: float = 0.01):
    if is_node(x):
        return x.graph.emit("leaky_relu", (x,), {"slope": float(slope)})
    return _lrelu(np.asarray(x, dtype=np.float64), slope)


def reduce_sum(x):
    if is_node(x):
        return x.graph.emit("sum", (x,))
    return np.sum(x)


def affine(x, W, b):
    """``x @ W.T + b`` with constant or recorded weights."""
    if is_node(W) or is_node(b):
        if not (is_node(W) and is_node(b)):
            raise TapeError("affine weights must be both recorded or both constant")
        if not is_node(x):
            x = W.graph.const(x)
        return W.graph.emit("linear", (x, W, b))
    W = _const(W)
    b = _const(b)
    if is_node(x):
        return x.graph.emit("affine", (x,), {"W": W, "b": b})
    return np.asarray(x, dtype=np.float64) @ W.T + b


def take(x, start: int, stop: int | None = None):
    """Slice ``[start:stop]`` of the feature axis (``stop`` defaults to start+1)."""
    stop = start + 1 if stop is None else stop
    if is_node(x):
        return x.graph.emit("slice", (x,), {"start": int(start), "stop": int(stop)})
    return np.asarray(x)[..., start:stop]


def concat(parts: Iterable):
    parts = list(parts)
    if any(is_node(p) for p in parts):
        g = _graph_of(*parts)
        nodes = [p if is_node(p) else g.const(p) for p in parts]
        return g.emit("concat", tuple(nodes))
    return _concat_fwd(*[np.asarray(p, dtype=np.float64) for p in parts])


def value_of(x) -> np.ndarray:
    return x.value if is_node(x) else np.asarray(x, dtype=np.float64)


_UFUNCS = {
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.negative: lambda x: x.__neg__(),
    np.sin: sin,
    np.cos: cos,
    np.tan: tan,
    np.square: square,
    np.reciprocal: recip,
}

Tape = Graph
