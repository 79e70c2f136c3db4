"""Unrolled tracking loops as graphs, reachable-set boxes, and reach-avoid verdicts."""

from __future__ import annotations

import csv
import io
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bounds.box import HyperRect, concat_boxes, hull
from .bounds.crown import UnverifiableError, bound_graph, check_supported
from .controller import TrackingPolicy, build_error_window, pad_reference, policy_control
from .dynamics import DynamicsError, DynamicsModel, step_discrete
from .numeric.graph import Graph, TapeError
from .reference import ReferenceTrajectory


@dataclass
class TnflGraph:
    """K closed-loop steps recorded as one graph.

    Inputs, in order: the initial state, then one disturbance block per step.
    The padded reference enters only as constants.
    """

    model: DynamicsModel
    policy: TrackingPolicy
    tau_padded: np.ndarray
    K: int
    k0: int
    graph: Graph
    x_id: int
    w_ids: list
    state_ids: list

    @property
    def n(self) -> int:
        return self.model.state_dim

    def evaluate(self, x_I, w_seq=None) -> np.ndarray:
        """Point evaluation of the recorded graph; returns ``(K, n)`` states."""
        feeds = {self.x_id: np.asarray(x_I, dtype=np.float64)}
        if w_seq is not None:
            w_seq = np.asarray(w_seq, dtype=np.float64)
            for j, wid in enumerate(self.w_ids):
                feeds[wid] = w_seq[j]
        else:
            for wid in self.w_ids:
                feeds[wid] = np.zeros(self.n)
        vals = self.graph.evaluate(feeds, upto=self.state_ids[-1])
        return np.stack([vals[i] for i in self.state_ids])

    def segment(self, k0: int, steps: int, x_nominal=None) -> "TnflGraph":
        """Graph of ``steps`` steps starting at step ``k0`` from a fresh state input."""
        if x_nominal is None:
            x_nominal = self.tau_padded[max(k0 - 1, 0)]
        return _unroll(self.model, self.policy, self.tau_padded, k0, steps, x_nominal)


def _unroll(model, policy, tau_padded, k0, steps, x_nominal) -> TnflGraph:
    g = Graph()
    g.step = k0
    x = g.input(np.asarray(x_nominal, dtype=np.float64), name="x_I")
    x_id = x.id
    w_ids, state_ids = [], []
    n = model.state_dim
    for j in range(steps):
        k = k0 + j
        g.step = k + 1
        w = g.input(np.zeros(n), name=f"w_{k + 1}")
        w_ids.append(w.id)
        e = build_error_window(x, tau_padded, k, policy.N)
        u = policy_control(policy, e)
        x = step_discrete(model, x, u, w, guard=False)
        state_ids.append(x.id)
    g.step = None
    return TnflGraph(model, policy, tau_padded, steps, k0, g, x_id, w_ids, state_ids)


def build_tnfl(model: DynamicsModel, policy: TrackingPolicy, tau, K: int | None = None,
               x_nominal=None) -> TnflGraph:
    """Unroll ``K`` steps of tracking the (padded) reference into one graph."""
    states = tau.states if isinstance(tau, ReferenceTrajectory) else np.asarray(tau, dtype=np.float64)
    if K is None:
        K = len(states)
    if K < 1:
        raise ValueError(f"horizon K must be >= 1, got {K}")
    if states.shape[-1] != model.state_dim:
        raise DynamicsError(f"reference width {states.shape[-1]} != state dim {model.state_dim}")
    tau_padded = pad_reference(states, K, policy.N)
    tnfl = _unroll(model, policy, tau_padded, 0, K, tau_padded[0] if x_nominal is None else x_nominal)
    try:
        check_supported(tnfl.graph)
    except TapeError as exc:
        raise TapeError(f"T-NFL graph is not relaxable: {exc}") from exc
    return tnfl


# ---------------------------------------------------------------------------
# reachable sets
# ---------------------------------------------------------------------------

@dataclass
class Verdict:
    safe_all_k: bool
    reaches_goal: bool
    first_violation_k: int | None

    @property
    def status(self) -> str:
        return "safe" if self.safe_all_k and self.reaches_goal else "unsafe"

    def to_dict(self) -> dict:
        return {"status": self.status, "safe_all_k": self.safe_all_k, "reaches_goal": self.reaches_goal,
                "first_violation_k": self.first_violation_k}


@dataclass
class RsoaResult:
    boxes: list  # HyperRect per timestep k = 1..K (fewer when stopped early)
    mode: int  # horizon N between re-boxing; N = K is one-shot
    partition: int = 0
    wall_s: float = 0.0
    verdict: Verdict | None = None
    status: str = "computed"  # computed | safe | unsafe | unknown
    error: str | None = None
    input_set: HyperRect | None = None

    @property
    def final_volume(self) -> float:
        return self.boxes[-1].volume() if self.boxes else float("nan")

    def to_dict(self) -> dict:
        d = {
            "mode": self.mode,
            "partition": self.partition,
            "boxes": [{"k": k + 1, "lo": b.lower.tolist(), "hi": b.upper.tolist()} for k, b in enumerate(self.boxes)],
            "verdict": (self.verdict.to_dict() if self.verdict else {"status": self.status}),
            "wall_s": self.wall_s,
        }
        if self.error:
            d["verdict"]["error"] = self.error
        if self.input_set is not None:
            d["input_set"] = self.input_set.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RsoaResult":
        boxes = [HyperRect(b["lo"], b["hi"]) for b in sorted(d["boxes"], key=lambda b: b["k"])]
        v = d.get("verdict", {})
        verdict = None
        if "safe_all_k" in v:
            verdict = Verdict(v["safe_all_k"], v["reaches_goal"], v.get("first_violation_k"))
        inp = HyperRect.from_dict(d["input_set"]) if "input_set" in d else None
        return cls(boxes, d["mode"], d.get("partition", 0), d.get("wall_s", 0.0), verdict,
                   v.get("status", "computed"), v.get("error"), inp)

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def boxes_csv(results) -> str:
    """Per-timestep bounds of one or more results, one row per (partition, k)."""
    results = list(results)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = results[0].boxes[0].dim if results and results[0].boxes else 0
    w.writerow(["partition", "k"] + [f"lo_{i}" for i in range(n)] + [f"hi_{i}" for i in range(n)])
    for r in results:
        for k, b in enumerate(r.boxes):
            w.writerow([r.partition, k + 1] + [repr(float(v)) for v in b.lower] + [repr(float(v)) for v in b.upper])
    return buf.getvalue()


def _disturbance_box(W: HyperRect, n: int) -> HyperRect:
    if W.dim != n:
        raise ValueError(f"disturbance box has {W.dim} dims, model expects {n}")
    return W


def compute_rsoa(tnfl: TnflGraph, X_I: HyperRect, W: HyperRect, N: int | None = None,
                 intermediate: str = "crown", stop_when=None) -> RsoaResult:
    """Per-timestep boxes R_1..R_K.

    ``N = K`` (default) bounds every step in one pass over the whole unrolled
    graph; smaller ``N`` re-boxes the state every ``N`` steps and continues
    from that box.  ``stop_when(k, box)`` may end the sweep early.
    """
    n, K = tnfl.n, tnfl.K
    if X_I.dim != n:
        raise ValueError(f"initial set has {X_I.dim} dims, model expects {n}")
    _disturbance_box(W, n)
    N = K if N is None else int(N)
    if N < 1:
        raise ValueError("horizon mode N must be >= 1")
    t0 = time.perf_counter()
    boxes: list[HyperRect] = []
    start = X_I
    k0 = 0
    stopped = False
    while k0 < K and not stopped:
        steps = min(N, K - k0)
        seg = tnfl if (k0 == 0 and steps == K) else tnfl.segment(tnfl.k0 + k0, steps, start.center)
        box = concat_boxes([start] + [W] * steps)
        res = bound_graph(seg.graph, box, seg.state_ids, intermediate)
        for sid in seg.state_ids:
            b = res.box(sid)
            boxes.append(b)
            if stop_when is not None and stop_when(len(boxes), b):
                stopped = True
                break
        start = boxes[-1]
        k0 += steps
    return RsoaResult(boxes, N, wall_s=time.perf_counter() - t0, input_set=X_I)


def check_specification(result: RsoaResult, spec) -> Verdict:
    """Reach-avoid verdict from stored boxes: safe at every k and inside the goal at K."""
    first = None
    for k, b in enumerate(result.boxes):
        if not spec.box_safe(b):
            first = k + 1
            break
    reaches = bool(result.boxes) and spec.box_in_goal(result.boxes[-1])
    return Verdict(first is None, reaches, first)


@dataclass
class PartitionResult:
    cells: list  # RsoaResult per cell, in grid order
    union: list  # hull of the cell boxes per timestep
    status: str  # safe | unsafe | unknown
    failing_cells: list = field(default_factory=list)
    wall_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "failing_cells": self.failing_cells,
            "wall_s": self.wall_s,
            "union": [{"k": k + 1, "lo": b.lower.tolist(), "hi": b.upper.tolist()} for k, b in enumerate(self.union)],
            "cells": [c.to_dict() for c in self.cells],
        }

    @property
    def first_violation_k(self):
        ks = [c.verdict.first_violation_k for c in self.cells if c.verdict and c.verdict.first_violation_k]
        return min(ks) if ks else None


def _verify_cell(args):
    model, policy, tau, K, cell, W, spec, N, fast_fail, intermediate, idx = args
    t0 = time.perf_counter()
    try:
        tnfl = build_tnfl(model, policy, tau, K, x_nominal=cell.center)
        stop = None
        if fast_fail and spec is not None:
            stop = lambda k, b: not spec.box_safe(b)
        res = compute_rsoa(tnfl, cell, W, N, intermediate, stop)
    except (UnverifiableError, DynamicsError) as exc:
        return RsoaResult([], N or K, idx, time.perf_counter() - t0, None, "unknown", str(exc), cell)
    res.partition = idx
    if spec is not None:
        res.verdict = check_specification(res, spec)
        if len(res.boxes) < K:
            res.verdict.reaches_goal = False
        res.status = res.verdict.status
    return res


def partition_and_verify(model, policy, tau, X_I: HyperRect, W: HyperRect, grid_counts, spec=None,
                         N: int | None = None, K: int | None = None, fast_fail: bool = False,
                         jobs: int = 1, intermediate: str = "crown") -> PartitionResult:
    """Verify every cell of a regular grid over ``X_I``.

    The overall status is ``unknown`` if any cell could not be bounded,
    otherwise ``unsafe`` if any cell fails the specification, else ``safe``.
    """
    t0 = time.perf_counter()
    states = tau.states if isinstance(tau, ReferenceTrajectory) else np.asarray(tau)
    K = len(states) if K is None else K
    cells = X_I.split(grid_counts)
    jobs_args = [(model, policy, tau, K, c, W, spec, N, fast_fail, intermediate, i) for i, c in enumerate(cells)]
    results: list[RsoaResult] = []
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_verify_cell, jobs_args))
    else:
        for a in jobs_args:
            r = _verify_cell(a)
            results.append(r)
            if fast_fail and r.status in ("unsafe", "unknown"):
                break
    unknown = [r.partition for r in results if r.status == "unknown"]
    unsafe = [r.partition for r in results if r.status == "unsafe"]
    if unknown:
        status = "unknown"
    elif unsafe:
        status = "unsafe"
    elif spec is None:
        status = "computed"
    elif len(results) < len(cells):
        status = "unsafe"
    else:
        status = "safe"
    union = []
    complete = [r for r in results if r.boxes]
    if complete and not unknown:
        depth = min(len(r.boxes) for r in complete)
        union = [hull(r.boxes[k] for r in complete) for k in range(depth)]
    return PartitionResult(results, union, status, sorted(unknown + unsafe), time.perf_counter() - t0)
