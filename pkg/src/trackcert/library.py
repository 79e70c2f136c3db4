"""Certified reference libraries, runtime selection among them, and coverage maps."""

from __future__ import annotations

import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds.box import HyperRect
from .controller import TrackingPolicy, pad_reference
from .dynamics import DynamicsModel, rollout
from .reach import partition_and_verify
from .reference import ReferenceTrajectory
from .scenario import SafetySpec, StubError, StubParams, stub_sample


class LibraryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# reference sources
# ---------------------------------------------------------------------------

@dataclass
class StubSource:
    """Callable reference source wrapping the multimodal stub.

    ``source(rng)`` starts at ``start``; ``source(rng, start=x)`` overrides
    the start (used by coverage maps to plan from a cell center).
    """

    spec: SafetySpec
    start: np.ndarray
    goal: np.ndarray
    params: StubParams

    def __call__(self, rng: np.random.Generator, start=None) -> ReferenceTrajectory:
        return stub_sample(self.spec, self.start if start is None else start, self.goal, self.params, rng)


def _draw(source, seed: int, index: int, start=None):
    # one generator per candidate index keeps admission independent of scheduling
    rng = np.random.default_rng([seed, index])
    try:
        return source(rng) if start is None else source(rng, start=start)
    except StubError:
        return None


def precheck(tau: ReferenceTrajectory, spec: SafetySpec, K: int | None = None) -> bool:
    """Every reference point is safe and the last one is in the goal."""
    states = tau.states if K is None else pad_reference(tau.states, K, 0)
    return bool(spec.trajectory_ok(states))


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

@dataclass
class Certificate:
    status: str  # safe | unsafe | unknown
    boxes: list
    wall_s: float = 0.0
    error: str | None = None


@dataclass
class Certifier:
    """Reach-avoid certification of one reference over an initial set."""

    model: DynamicsModel
    policy: TrackingPolicy
    W: HyperRect
    spec: SafetySpec
    K: int | None = None
    N: int | None = None
    grid: object = 1
    intermediate: str = "crown"
    fast_fail: bool = True

    def __call__(self, tau: ReferenceTrajectory, X_I: HyperRect) -> Certificate:
        res = partition_and_verify(self.model, self.policy, tau, X_I, self.W, self.grid, self.spec,
                                   self.N, self.K or len(tau), self.fast_fail, 1, self.intermediate)
        err = next((c.error for c in res.cells if c.error), None)
        return Certificate(res.status, res.union, res.wall_s, err)


class MemoCertifier:
    """Caches certificates by reference and initial set.

    Sound whenever the wrapped certifier is a pure function of its inputs,
    which holds for :class:`Certifier`.  Used for repeated library builds
    over sources with few distinct references.
    """

    def __init__(self, certifier):
        self.certifier = certifier
        self.cache: dict = {}
        self.calls = 0

    def __call__(self, tau: ReferenceTrajectory, X_I: HyperRect) -> Certificate:
        key = (tau.states.tobytes(), tau.states.shape, X_I.lower.tobytes(), X_I.upper.tobytes())
        if key not in self.cache:
            self.calls += 1
            self.cache[key] = self.certifier(tau, X_I)
        return self.cache[key]


def _certify_job(args):
    certifier, tau, X_I = args
    return certifier(tau, X_I)


# ---------------------------------------------------------------------------
# library
# ---------------------------------------------------------------------------

def _boxes_to_list(boxes) -> list:
    return [{"k": k + 1, "lo": b.lower.tolist(), "hi": b.upper.tolist()} for k, b in enumerate(boxes)]


def _boxes_from_list(items) -> list:
    return [HyperRect(b["lo"], b["hi"]) for b in sorted(items, key=lambda b: b["k"])]


@dataclass
class LibraryEntry:
    tau: ReferenceTrajectory
    boxes: list  # HyperRect per timestep k = 1..K
    input_set: HyperRect
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"tau": self.tau.to_dict(), "input_set": self.input_set.to_dict(),
                "boxes": _boxes_to_list(self.boxes), "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "LibraryEntry":
        return cls(ReferenceTrajectory.from_dict(d["tau"]), _boxes_from_list(d["boxes"]),
                   HyperRect.from_dict(d["input_set"]), d.get("meta", {}))


@dataclass
class RejectionLog:
    sampled: int = 0
    precheck_fail: int = 0
    rsoa_fail: int = 0

    @property
    def admitted(self) -> int:
        return self.sampled - self.precheck_fail - self.rsoa_fail

    def to_dict(self) -> dict:
        return {"sampled": self.sampled, "precheck_fail": self.precheck_fail, "rsoa_fail": self.rsoa_fail}


@dataclass
class RsoaLibrary:
    entries: list
    config: dict  # budget, boxes, K, N, spec_hash, policy_hash
    log: RejectionLog = field(default_factory=RejectionLog)
    complete: bool = True  # False when attempts ran out before the budget was met

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def K(self) -> int:
        return int(self.config["K"])

    def to_dict(self) -> dict:
        return {"config": self.config, "entries": [e.to_dict() for e in self.entries],
                "log": self.log.to_dict(), "complete": self.complete}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict, spec: SafetySpec | None = None,
                  policy: TrackingPolicy | None = None) -> "RsoaLibrary":
        cfg = d["config"]
        if spec is not None and cfg.get("spec_hash") != spec.digest():
            raise LibraryError("library was certified against a different safety spec")
        if policy is not None and cfg.get("policy_hash") != policy.digest():
            raise LibraryError("library was certified with a different policy")
        log = RejectionLog(**d.get("log", {}))
        return cls([LibraryEntry.from_dict(e) for e in d["entries"]], cfg, log, d.get("complete", True))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, spec=None, policy=None) -> "RsoaLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()), spec, policy)


def build_library(source, model: DynamicsModel, policy: TrackingPolicy, X_I: HyperRect, W: HyperRect,
                  spec: SafetySpec, C: int, max_attempts: int | None = None, *, seed: int = 0,
                  K: int | None = None, N: int | None = None, grid=1, certifier=None, jobs: int = 1,
                  intermediate: str = "crown") -> RsoaLibrary:
    """Sample, precheck and certify references until ``C`` are admitted.

    Candidate ``i`` is drawn from ``np.random.default_rng([seed, i])`` and
    candidates are admitted in index order, so the result does not depend
    on ``jobs``.  A candidate is admitted iff its reference passes
    :func:`precheck` and its certificate is ``safe``.
    """
    if C < 1:
        raise ValueError("library budget C must be >= 1")
    max_attempts = 10 * C if max_attempts is None else int(max_attempts)
    if max_attempts < C:
        raise ValueError("max_attempts must be >= C")
    if certifier is None:
        certifier = Certifier(model, policy, W, spec, K, N, grid, intermediate)
    log = RejectionLog()
    entries: list[LibraryEntry] = []
    pool = ProcessPoolExecutor(jobs) if jobs > 1 else None
    i = 0
    try:
        while len(entries) < C and i < max_attempts:
            idx = range(i, min(i + max(1, jobs), max_attempts))
            cands = [_draw(source, seed, j) for j in idx]
            passed = [t is not None and t.state_dim == model.state_dim and precheck(t, spec, K) for t in cands]
            jobs_args = [(certifier, t, X_I) for t, ok in zip(cands, passed) if ok]
            if pool is not None:
                certs = iter(list(pool.map(_certify_job, jobs_args)))
            else:
                certs = iter(_certify_job(a) for a in jobs_args)
            for j, tau, ok in zip(idx, cands, passed):
                if len(entries) >= C:
                    break
                log.sampled += 1
                if not ok:
                    log.precheck_fail += 1
                    continue
                cert = next(certs)
                if cert.status != "safe":
                    log.rsoa_fail += 1
                    continue
                entries.append(LibraryEntry(tau, cert.boxes, X_I, {"source": tau.source, "seed": seed,
                                                                    "index": j, **tau.meta}))
            i = idx.stop
    finally:
        if pool is not None:
            pool.shutdown()
    complete = len(entries) == C
    if not complete:
        warnings.warn(f"library has {len(entries)} of {C} entries after {log.sampled} attempts")
    config = {
        "C": C, "max_attempts": max_attempts, "seed": seed,
        "K": K if K is not None else (len(entries[0].tau) if entries else None),
        "N": N, "X_I": X_I.to_dict(), "W": W.to_dict(),
        "spec_hash": spec.digest(), "policy_hash": policy.digest(),
    }
    return RsoaLibrary(entries, config, log, complete)


# ---------------------------------------------------------------------------
# runtime
# ---------------------------------------------------------------------------

def _stack_padded(trajs, K: int | None = None) -> np.ndarray:
    arrs = [t.states if isinstance(t, ReferenceTrajectory) else np.asarray(t, dtype=np.float64) for t in trajs]
    K = max(len(a) for a in arrs) if K is None else K
    return np.stack([pad_reference(a, K, 0) for a in arrs])


def _refs(library) -> list:
    if isinstance(library, RsoaLibrary):
        return [e.tau for e in library.entries]
    return [e.tau if isinstance(e, LibraryEntry) else e for e in library]


def select_nearest(tau_samp, library, candidates=None) -> tuple[int, float]:
    """``(i*, E_tau)`` minimising the summed squared pointwise distance.

    Shorter trajectories are padded with their final point; ties go to the
    lowest index.  ``candidates`` restricts the search to those indices.
    """
    refs = _refs(library)
    if not refs:
        raise LibraryError("cannot select from an empty library")
    idx = list(range(len(refs))) if candidates is None else sorted(candidates)
    if not idx:
        raise LibraryError("no candidate entries to select from")
    K = max(max(len(_as_states(refs[i])) for i in idx), len(_as_states(tau_samp)))
    stack = _stack_padded([refs[i] for i in idx], K)
    samp = pad_reference(_as_states(tau_samp), K, 0)
    d = np.sum((stack - samp) ** 2, axis=(1, 2))
    j = int(np.argmin(d))
    return idx[j], float(d[j])


def _as_states(t) -> np.ndarray:
    return t.states if isinstance(t, ReferenceTrajectory) else np.asarray(t, dtype=np.float64)


@dataclass
class RuntimeReport:
    index: int
    E_tau: float
    in_input_set: bool
    w_admissible: bool
    contained: np.ndarray  # per-step membership of the rollout in the entry's boxes
    warnings: list = field(default_factory=list)

    @property
    def certified(self) -> bool:
        return self.in_input_set and self.w_admissible

    @property
    def all_contained(self) -> bool:
        return bool(np.all(self.contained))

    def to_dict(self) -> dict:
        return {"index": self.index, "E_tau": self.E_tau, "in_input_set": self.in_input_set,
                "w_admissible": self.w_admissible, "certified": self.certified,
                "all_contained": self.all_contained, "contained": self.contained.tolist(),
                "warnings": self.warnings}


def _select_for_state(x_I, tau_samp, library: RsoaLibrary):
    x_I = np.asarray(x_I, dtype=np.float64)
    inside = [i for i, e in enumerate(library.entries) if e.input_set.contains(x_I)]
    i, E = select_nearest(tau_samp, library, inside or None)
    return i, E, bool(inside)


def execute_runtime(x_I, tau_samp, library: RsoaLibrary, policy: TrackingPolicy, model: DynamicsModel,
                    w_seq=None, require_certified: bool = False):
    """Track the library reference nearest to ``tau_samp`` from ``x_I``.

    Entries whose input set contains ``x_I`` are preferred; if there are
    none the nearest entry is used and the report says so.  Returns the
    closed-loop trajectory ``(K, n)`` and a :class:`RuntimeReport`.
    """
    i, E, inside = _select_for_state(x_I, tau_samp, library)
    notes = []
    if not inside:
        msg = "initial state is outside every certified input set"
        if require_certified:
            raise LibraryError(msg)
        notes.append(msg)
    entry = library.entries[i]
    K = len(entry.boxes)
    w_ok = True
    if w_seq is not None:
        w_arr = np.asarray(w_seq, dtype=np.float64)
        W = HyperRect.from_dict(library.config["W"]) if "W" in library.config else None
        w_ok = W is None or bool(np.all(W.contains(w_arr[:K])))
        if not w_ok:
            notes.append("disturbance sequence leaves the certified disturbance set")
    xi = rollout(model, policy, np.asarray(x_I, dtype=np.float64), pad_reference(entry.tau.states, K, policy.N),
                 w_seq, K=K)
    contained = np.array([b.contains(x) for b, x in zip(entry.boxes, xi)], dtype=bool)
    if not contained.all():
        notes.append(f"trajectory leaves the certified boxes at k={int(np.argmin(contained)) + 1}")
    return xi, RuntimeReport(i, E, inside, w_ok, contained, notes)


def imitation_error(x_I, tau_samp, library: RsoaLibrary, policy: TrackingPolicy, model: DynamicsModel) -> float:
    """Frobenius distance between tracking the selected entry and tracking ``tau_samp`` (no disturbance)."""
    i, _, _ = _select_for_state(x_I, tau_samp, library)
    K = len(library.entries[i].boxes)
    x_I = np.asarray(x_I, dtype=np.float64)
    a = rollout(model, policy, x_I, pad_reference(library.entries[i].tau.states, K, policy.N), None, K=K)
    b = rollout(model, policy, x_I, pad_reference(_as_states(tau_samp), K, policy.N), None, K=K)
    return float(np.linalg.norm(a - b))


def estimate_reference_lipschitz(model: DynamicsModel, policy: TrackingPolicy, x_I, refs, pairs: int = 1000,
                                 rng: np.random.Generator | None = None, margin: float = 0.1,
                                 K: int | None = None) -> float:
    """Empirical Lipschitz constant of the closed loop in the reference.

    Max over random reference pairs of ``||G(x,a) - G(x,b)|| / ||a - b||``,
    inflated by ``margin``.  Used only to report delta = eps / L.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    taus = _stack_padded(refs, K)
    K = taus.shape[1]
    if len(taus) < 2:
        raise ValueError("need at least two references")
    padded = np.stack([pad_reference(t, K, policy.N) for t in taus])
    x0 = np.broadcast_to(np.asarray(x_I, dtype=np.float64), (len(taus), taus.shape[2]))
    xs = rollout(model, policy, x0, padded, None, K=K)
    a = rng.integers(0, len(taus), pairs)
    b = rng.integers(0, len(taus), pairs)
    keep = np.linalg.norm((taus[a] - taus[b]).reshape(pairs, -1), axis=1) > 0
    if not keep.any():
        raise ValueError("all sampled reference pairs coincide")
    num = np.linalg.norm((xs[a] - xs[b]).reshape(pairs, -1), axis=1)[keep]
    den = np.linalg.norm((taus[a] - taus[b]).reshape(pairs, -1), axis=1)[keep]
    return float(np.max(num / den) * (1.0 + margin))


def required_library_size(alpha: float, p_samp: float) -> int:
    """Smallest C with exp(-p_samp * C) <= alpha."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if not 0.0 < p_samp <= 1.0:
        raise ValueError(f"p_samp must lie in (0, 1], got {p_samp}")
    c = math.log(1.0 / alpha) / p_samp
    # absorb rounding so that exact integers are not bumped to the next one
    return max(1, math.ceil(c - 1e-9 * max(1.0, c)))


def coverage_probability_bound(p_samp: float, C: int) -> float:
    """Lower bound 1 - exp(-p C) on the chance that C draws include a delta-close one."""
    return 1.0 - math.exp(-p_samp * C)


# ---------------------------------------------------------------------------
# coverage maps over large initial sets
# ---------------------------------------------------------------------------

@dataclass
class CoverageCell:
    index: int
    input_set: HyperRect
    status: str  # entry | unsafe | unknown
    entry: LibraryEntry | None = None
    boxes: list = field(default_factory=list)  # stored for requery even when unsafe
    error: str | None = None

    def to_dict(self) -> dict:
        d = {"index": self.index, "input_set": self.input_set.to_dict(), "status": self.status,
             "boxes": _boxes_to_list(self.boxes)}
        if self.entry is not None:
            d["tau"] = self.entry.tau.to_dict()
        if self.error:
            d["error"] = self.error
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageCell":
        boxes = _boxes_from_list(d.get("boxes", []))
        inp = HyperRect.from_dict(d["input_set"])
        entry = LibraryEntry(ReferenceTrajectory.from_dict(d["tau"]), boxes, inp) if "tau" in d else None
        return cls(d["index"], inp, d["status"], entry, boxes, d.get("error"))


@dataclass
class CoverageMap:
    cells: list
    grid: list
    config: dict
    wall_s: float = 0.0

    @property
    def safe_cells(self) -> list:
        return [c.index for c in self.cells if c.status == "entry"]

    def requery(self, spec: SafetySpec) -> list:
        """Indices of cells whose stored boxes satisfy ``spec``; no bounds are recomputed."""
        out = []
        for c in self.cells:
            if c.status == "unknown" or not c.boxes:
                continue
            if all(spec.box_safe(b) for b in c.boxes) and spec.box_in_goal(c.boxes[-1]):
                out.append(c.index)
        return out

    def to_library(self) -> RsoaLibrary:
        entries = [c.entry for c in self.cells if c.status == "entry"]
        return RsoaLibrary(entries, dict(self.config), RejectionLog(len(self.cells), 0, len(self.cells) - len(entries)))

    def to_dict(self) -> dict:
        return {"grid": self.grid, "config": self.config, "wall_s": self.wall_s,
                "cells": [c.to_dict() for c in self.cells]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CoverageMap":
        return cls([CoverageCell.from_dict(c) for c in d["cells"]], d["grid"], d["config"], d.get("wall_s", 0.0))


def coverage_map(model: DynamicsModel, policy: TrackingPolicy, source, X_I_large: HyperRect, grid,
                 W: HyperRect, spec: SafetySpec, *, K: int | None = None, N: int | None = None,
                 seed: int = 0, jobs: int = 1, intermediate: str = "crown") -> CoverageMap:
    """Certify one reference per grid cell, with the cell itself as the initial set.

    Cell ``i`` plans from the cell center with generator ``[seed, i]``.  Full
    box sequences are kept for every certified-or-not cell so that
    :meth:`CoverageMap.requery` can re-check them against new obstacles.
    """
    t0 = time.perf_counter()
    cells = X_I_large.split(grid)
    certifier = Certifier(model, policy, W, spec, K, N, 1, intermediate, fast_fail=False)
    taus = [_draw(source, seed, i, start=c.center) for i, c in enumerate(cells)]
    jobs_args = [(certifier, t, c) for t, c in zip(taus, cells) if t is not None]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as ex:
            certs = iter(list(ex.map(_certify_job, jobs_args)))
    else:
        certs = iter(_certify_job(a) for a in jobs_args)
    out = []
    for i, (tau, cell) in enumerate(zip(taus, cells)):
        if tau is None:
            out.append(CoverageCell(i, cell, "unsafe", error="no reference from this cell"))
            continue
        cert = next(certs)
        if cert.status == "safe" and precheck(tau, spec, K):
            entry = LibraryEntry(tau, cert.boxes, cell, {"source": tau.source, "seed": seed, "index": i})
            out.append(CoverageCell(i, cell, "entry", entry, cert.boxes))
        elif cert.status == "unknown":
            out.append(CoverageCell(i, cell, "unknown", error=cert.error))
        else:
            out.append(CoverageCell(i, cell, "unsafe", boxes=cert.boxes))
    counts = np.broadcast_to(np.asarray(grid, dtype=int), (X_I_large.dim,)).tolist()
    config = {"X_I": X_I_large.to_dict(), "W": W.to_dict(), "K": K, "N": N, "seed": seed,
              "spec_hash": spec.digest(), "policy_hash": policy.digest()}
    return CoverageMap(out, counts, config, time.perf_counter() - t0)
