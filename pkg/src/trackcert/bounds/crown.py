"""Interval propagation and CROWN-style backward affine bounds on a recorded graph.

The graph is any :class:`~trackcert.numeric.graph.Graph` whose values are
1-D vectors.  Its input nodes, in recording order, form the concatenated
input vector ``z`` the enclosures are expressed over.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ..numeric.graph import Graph, TapeError
from .box import HyperRect
from .relax import SingularityError, exact_range, mccormick_mid, relax_arrays

UNARY = ("sin", "cos", "tan", "recip", "leaky_relu", "softplus", "square")
NONLINEAR = UNARY + ("mul",)
SUPPORTED = ("input", "const", "affine", "add", "sub", "scale", "shift", "slice", "concat", "sum") + NONLINEAR


class UnverifiableError(RuntimeError):
    """A node's bounds cannot be relaxed soundly (pole inside the interval, overflow)."""

    def __init__(self, node_id: int, op: str, step, detail: str = ""):
        where = f"node {node_id} ({op})" + (f" at timestep {step}" if step is not None else "")
        super().__init__(f"unverifiable: {where}" + (f": {detail}" if detail else ""))
        self.node_id = node_id
        self.op = op
        self.step = step


@dataclass
class AffineEnclosure:
    """``Psi z + alpha <= G(z) <= Phi z + beta`` for every z in the input box."""

    Psi: np.ndarray
    alpha: np.ndarray
    Phi: np.ndarray
    beta: np.ndarray

    def bounds_at(self, z):
        z = np.asarray(z, dtype=np.float64)
        return z @ self.Psi.T + self.alpha, z @ self.Phi.T + self.beta

    def to_dict(self) -> dict:
        return {"Psi": self.Psi.tolist(), "alpha": self.alpha.tolist(),
                "Phi": self.Phi.tolist(), "beta": self.beta.tolist()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "AffineEnclosure":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("Psi", "alpha", "Phi", "beta")))


def concretize(enc: AffineEnclosure, box: HyperRect) -> HyperRect:
    """Tightest interval implied by the enclosure over the box (sign rule)."""
    lo, hi = box.lower, box.upper
    Pp, Pn = np.maximum(enc.Psi, 0.0), np.minimum(enc.Psi, 0.0)
    Fp, Fn = np.maximum(enc.Phi, 0.0), np.minimum(enc.Phi, 0.0)
    lower = Pp @ lo + Pn @ hi + enc.alpha
    upper = Fp @ hi + Fn @ lo + enc.beta
    return HyperRect(np.minimum(lower, upper), np.maximum(lower, upper))


def check_supported(graph: Graph, ids=None) -> None:
    bad = sorted({graph.nodes[i].op for i in (ids if ids is not None else range(len(graph)))} - set(SUPPORTED))
    if bad:
        raise TapeError(f"graph contains primitives with no relaxation: {', '.join(bad)}")


def _input_boxes(graph: Graph, input_box) -> dict[int, tuple]:
    if isinstance(input_box, dict):
        return {i: (b.lower, b.upper) for i, b in input_box.items()}
    out, pos = {}, 0
    for i in graph.input_ids:
        d = graph.nodes[i].value.size
        out[i] = (input_box.lower[pos:pos + d], input_box.upper[pos:pos + d])
        pos += d
    if pos != input_box.dim:
        raise ValueError(f"input box has {input_box.dim} dims, graph inputs need {pos}")
    return out


def _bcast(lo, hi, d):
    return np.broadcast_to(lo, (d,)), np.broadcast_to(hi, (d,))


def _unary_range(op, node, lo, hi):
    slope = node.attrs.get("slope", 0.01)
    if op == "leaky_relu":
        f = lambda t: np.where(t >= 0, t, slope * t)
        return f(lo), f(hi)
    out_lo = np.empty_like(lo)
    out_hi = np.empty_like(hi)
    for i in range(lo.size):
        out_lo[i], out_hi[i] = exact_range(op, float(lo[i]), float(hi[i]))
    return out_lo, out_hi


def ibp_node(graph: Graph, node, iv: dict) -> tuple:
    """Interval of one node from the intervals of its inputs."""
    op = node.op
    ins = [iv[i] for i in node.inputs]
    if op == "const":
        v = np.atleast_1d(node.value)
        return v, v
    if op == "affine":
        (lo, hi), W, b = ins[0], node.attrs["W"], node.attrs["b"]
        Wp, Wn = np.maximum(W, 0.0), np.minimum(W, 0.0)
        return Wp @ lo + Wn @ hi + b, Wp @ hi + Wn @ lo + b
    if op == "add":
        return ins[0][0] + ins[1][0], ins[0][1] + ins[1][1]
    if op == "sub":
        return ins[0][0] - ins[1][1], ins[0][1] - ins[1][0]
    if op == "scale":
        c = node.attrs["c"]
        a, b = ins[0][0] * c, ins[0][1] * c
        return np.minimum(a, b), np.maximum(a, b)
    if op == "shift":
        c = node.attrs["c"]
        return ins[0][0] + c, ins[0][1] + c
    if op == "slice":
        s, e = node.attrs["start"], node.attrs["stop"]
        return ins[0][0][s:e], ins[0][1][s:e]
    if op == "concat":
        parts = [_bcast(lo, hi, graph.nodes[i].value.size) for (lo, hi), i in zip(ins, node.inputs)]
        return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])
    if op == "sum":
        return np.atleast_1d(ins[0][0].sum()), np.atleast_1d(ins[0][1].sum())
    if op == "mul":
        (al, ah), (bl, bh) = ins
        cands = np.stack([al * bl, al * bh, ah * bl, ah * bh])
        return cands.min(axis=0), cands.max(axis=0)
    if op in UNARY:
        try:
            return _unary_range(op, node, *ins[0])
        except SingularityError as exc:
            raise UnverifiableError(node.id, op, node.step, str(exc)) from exc
    raise TapeError(f"no interval rule for primitive {op!r} (node {node.id})")


def _finalize(node, lo, hi):
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), node.value.shape).astype(np.float64)
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), node.value.shape).astype(np.float64)
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise UnverifiableError(node.id, node.op, node.step, "bounds overflowed")
    return np.atleast_1d(lo), np.atleast_1d(hi)


def ibp_forward(graph: Graph, input_box, upto: int | None = None) -> dict[int, tuple]:
    """Per-node ``(lower, upper)`` intervals by forward interval arithmetic."""
    boxes = _input_boxes(graph, input_box)
    stop = len(graph) if upto is None else upto + 1
    check_supported(graph, range(stop))
    iv: dict[int, tuple] = {}
    for node in graph.nodes[:stop]:
        if node.op == "input":
            iv[node.id] = boxes[node.id]
        else:
            iv[node.id] = _finalize(node, *ibp_node(graph, node, iv))
    return iv


def _reduce(A, d_in):
    if A.shape[1] == d_in:
        return A
    if d_in == 1:
        return A.sum(axis=1, keepdims=True)
    raise TapeError(f"cannot unbroadcast width {A.shape[1]} to {d_in}")


def _backward(graph: Graph, target: int, iv: dict, relax_cache: dict):
    """Coefficients on every input node plus constant offset.

    Rows ``[:m]`` carry the lower bound and rows ``[m:]`` the upper bound.
    """
    tnode = graph.nodes[target]
    m = tnode.value.size
    eye = np.eye(m)
    coef: dict[int, np.ndarray] = {target: np.vstack([eye, eye])}
    bias = np.zeros(2 * m)
    low = np.zeros((2 * m, 1), dtype=bool)
    low[:m] = True

    def push(i, A):
        if i in coef:
            coef[i] = coef[i] + A
        else:
            coef[i] = A

    inputs = {}
    for nid in range(target, -1, -1):
        A = coef.pop(nid, None)
        if A is None:
            continue
        node = graph.nodes[nid]
        op = node.op
        if op == "input":
            inputs[nid] = A
            continue
        if op == "const":
            bias += A @ np.broadcast_to(np.atleast_1d(node.value), (A.shape[1],))
        elif op == "affine":
            push(node.inputs[0], A @ node.attrs["W"])
            bias += A @ node.attrs["b"]
        elif op == "add":
            for i in node.inputs:
                push(i, _reduce(A, graph.nodes[i].value.size))
        elif op == "sub":
            a, b = node.inputs
            push(a, _reduce(A, graph.nodes[a].value.size))
            push(b, _reduce(-A, graph.nodes[b].value.size))
        elif op == "scale":
            i = node.inputs[0]
            push(i, _reduce(A * node.attrs["c"], graph.nodes[i].value.size))
        elif op == "shift":
            i = node.inputs[0]
            bias += A @ np.broadcast_to(node.attrs["c"], (A.shape[1],))
            push(i, _reduce(A, graph.nodes[i].value.size))
        elif op == "slice":
            i = node.inputs[0]
            B = np.zeros((A.shape[0], graph.nodes[i].value.size))
            B[:, node.attrs["start"]:node.attrs["stop"]] = A
            push(i, B)
        elif op == "concat":
            pos = 0
            for i in node.inputs:
                d = graph.nodes[i].value.size
                push(i, A[:, pos:pos + d])
                pos += d
            if pos != A.shape[1]:
                raise TapeError(f"concat node {nid} broadcasts its parts; not supported in bounding")
        elif op == "sum":
            i = node.inputs[0]
            push(i, np.repeat(A, graph.nodes[i].value.size, axis=1))
        elif op in UNARY:
            i = node.inputs[0]
            key = (nid, "u")
            if key not in relax_cache:
                lo, hi = iv[i]
                try:
                    relax_cache[key] = relax_arrays(op, lo, hi, {"slope": node.attrs.get("slope", 0.01)})
                except Exception as exc:  # singularity or overflow inside the relaxation
                    raise UnverifiableError(nid, op, node.step, str(exc)) from exc
            aL, bL, aU, bU = relax_cache[key]
            pos = A >= 0
            use_low = pos == low  # lower rows with A>=0 or upper rows with A<0
            slope = np.where(use_low, aL, aU)
            icpt = np.where(use_low, bL, bU)
            push(i, A * slope)
            bias += (A * icpt).sum(axis=1)
        elif op == "mul":
            a, b = node.inputs
            key = (nid, "m")
            if key not in relax_cache:
                d = node.value.size
                al, ah = _bcast(*iv[a], d)
                bl, bh = _bcast(*iv[b], d)
                relax_cache[key] = mccormick_mid(al, ah, bl, bh)
            ca, cb, c0L, c0U = relax_cache[key]
            use_low = (A >= 0) == low
            push(a, _reduce(A * ca, graph.nodes[a].value.size))
            push(b, _reduce(A * cb, graph.nodes[b].value.size))
            bias += (A * np.where(use_low, c0L, c0U)).sum(axis=1)
        else:
            raise TapeError(f"no backward rule for primitive {op!r} (node {nid})")
    return inputs, bias, m


def crown_backward(graph: Graph, input_box, node_intervals: dict, target: int,
                   _cache: dict | None = None) -> AffineEnclosure:
    """Affine enclosure of node ``target`` over the concatenated graph inputs."""
    inputs, bias, m = _backward(graph, target, node_intervals, {} if _cache is None else _cache)
    lows, highs = [], []
    for i in graph.input_ids:
        A = inputs.get(i)
        if A is None:
            A = np.zeros((2 * m, graph.nodes[i].value.size))
        lows.append(A[:m])
        highs.append(A[m:])
    return AffineEnclosure(np.hstack(lows), bias[:m].copy(), np.hstack(highs), bias[m:].copy())


def _concretize_inputs(inputs, bias, m, boxes):
    lower = bias[:m].copy()
    upper = bias[m:].copy()
    for i, A in inputs.items():
        lo, hi = boxes[i]
        L, U = A[:m], A[m:]
        lower += np.maximum(L, 0.0) @ lo + np.minimum(L, 0.0) @ hi
        upper += np.maximum(U, 0.0) @ hi + np.minimum(U, 0.0) @ lo
    return lower, upper


@dataclass
class BoundResult:
    intervals: dict  # node id -> (lower, upper)
    enclosures: dict  # target id -> AffineEnclosure

    def box(self, node_id: int) -> HyperRect:
        lo, hi = self.intervals[node_id]
        return HyperRect(lo, np.maximum(lo, hi))


def bound_graph(graph: Graph, input_box, targets, intermediate: str = "crown",
                keep_enclosures: bool = False) -> BoundResult:
    """Bounds for ``targets`` (and every node they depend on).

    ``intermediate="crown"`` tightens the intervals feeding every nonlinear
    node with their own backward pass before relaxing them; ``"ibp"`` uses
    plain interval arithmetic there.  Target bounds always come from a
    backward pass intersected with interval arithmetic.
    """
    if intermediate not in ("crown", "ibp"):
        raise ValueError(f"unknown intermediate bound mode {intermediate!r}")
    targets = list(targets)
    boxes = _input_boxes(graph, input_box)
    needed: set[int] = set()
    for t in targets:
        needed |= graph.ancestors(t)
    check_supported(graph, needed)
    refine = set(targets)
    if intermediate == "crown":
        for nid in needed:
            node = graph.nodes[nid]
            if node.op in NONLINEAR:
                refine.update(node.inputs)

    iv: dict[int, tuple] = {}
    tight: set[int] = set()
    cache: dict = {}
    enclosures = {}
    for nid in sorted(needed):
        node = graph.nodes[nid]
        if node.op == "input":
            iv[nid] = boxes[nid]
            tight.add(nid)
            continue
        lo, hi = _finalize(node, *ibp_node(graph, node, iv))
        if node.op == "const" or (node.op in ("slice", "concat") and all(i in tight for i in node.inputs)):
            tight.add(nid)
        elif nid in refine and node.op not in UNARY and node.op != "mul":
            inputs, bias, m = _backward(graph, nid, iv, cache)
            clo, chi = _concretize_inputs(inputs, bias, m, boxes)
            if not (np.all(np.isfinite(clo)) and np.all(np.isfinite(chi))):
                raise UnverifiableError(nid, node.op, node.step, "bounds overflowed")
            lo, hi = np.maximum(lo, clo), np.minimum(hi, chi)
            hi = np.maximum(lo, hi)
            tight.add(nid)
            if keep_enclosures and nid in targets:
                enclosures[nid] = crown_backward(graph, input_box, iv, nid, cache)
        iv[nid] = (lo, hi)
    return BoundResult(iv, enclosures)


def input_box_of(graph: Graph, boxes: dict) -> HyperRect:
    """Concatenate per-input-node boxes in recording order."""
    from .box import concat_boxes
    return concat_boxes([boxes[i] for i in graph.input_ids])
