"""Command-line entry point: ``trackcert <command> CONFIG``.

Every command reads one JSON config, validates it, writes its artifacts
plus ``resolved_config.json`` into the output directory and exits with
0 (safe/success), 1 (unsafe/failed), 2 (usage or config error) or
3 (unknown / unverifiable).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
import warnings
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .bounds.box import HyperRect
from .controller import (
    CurveSampler,
    TrainConfig,
    TrainingDiverged,
    config_hash,
    load_policy,
    save_policy,
    train_tracking_controller,
)
from .dynamics import DynamicsError, make_model, model_from_dict
from .library import (
    CoverageMap,
    LibraryError,
    RsoaLibrary,
    StubSource,
    build_library,
    coverage_map,
    execute_runtime,
    imitation_error,
)
from .reach import RsoaResult, boxes_csv, build_tnfl, compute_rsoa, partition_and_verify
from .reference import ReferenceFormatError, ReferenceTrajectory, load_reference
from .scenario import SafetySpec, SpecError, StubError, StubMode, StubParams, load_spec

log = logging.getLogger("trackcert")

EXIT_OK, EXIT_UNSAFE, EXIT_CONFIG, EXIT_UNKNOWN = 0, 1, 2, 3
STATUS_EXIT = {"safe": EXIT_OK, "unsafe": EXIT_UNSAFE, "unknown": EXIT_UNKNOWN, "computed": EXIT_OK}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# schemas
# ---------------------------------------------------------------------------

_VEC = {"type": "array", "items": {"type": "number"}, "minItems": 1}
_BOX = {
    "type": "object",
    "oneOf": [
        {"required": ["lo", "hi"]},
        {"required": ["half_width"]},
    ],
    "properties": {"lo": _VEC, "hi": _VEC, "center": _VEC, "half_width": _VEC},
}
_MODEL = {
    "oneOf": [
        {"type": "string"},
        {"type": "object", "required": ["kind"], "properties": {"kind": {"type": "string"}}},
    ]
}
_PATH_OR_OBJ = {"type": ["string", "object"]}
_STUB = {
    "type": "object",
    "required": ["start", "goal"],
    "properties": {
        "start": _VEC,
        "goal": _VEC,
        "K": {"type": "integer", "minimum": 1},
        "modes": {"type": "array", "minItems": 1, "items": {
            "type": "object", "required": ["name", "prob", "side"],
            "properties": {"name": {"type": "string"}, "prob": {"type": "number", "minimum": 0},
                           "side": {"type": "number"}}}},
        "clearance": {"type": "number"},
        "via_sigma": {"type": "number", "minimum": 0},
        "jitter": {"type": "number", "minimum": 0},
        "interp": {"enum": ["catmull_rom", "linear"]},
        "obstacle": {"type": "integer", "minimum": 0},
    },
}
_COMMON = {
    "model": _MODEL,
    "policy": {"type": "string"},
    "spec": _PATH_OR_OBJ,
    "reference": _PATH_OR_OBJ,
    "X_I": _BOX,
    "W": _BOX,
    "K": {"type": "integer", "minimum": 1},
    "N": {"type": "integer", "minimum": 1},
    "grid": {"oneOf": [{"type": "integer", "minimum": 1},
                       {"type": "array", "items": {"type": "integer", "minimum": 1}}]},
    "intermediate": {"enum": ["crown", "ibp"]},
    "seed": {"type": "integer"},
    "out_dir": {"type": "string"},
    "stub": _STUB,
}
_TRAIN_BLOCK = {"type": "object", "required": ["x_L", "x_U", "u_L", "u_U"]}


def _schema(required, extra=None) -> dict:
    props = dict(_COMMON)
    props.update(extra or {})
    return {"type": "object", "required": list(required), "properties": props}


SCHEMAS = {
    "train": _schema(["model", "train"], {"train": _TRAIN_BLOCK, "sampler": {"type": "object"}}),
    "verify": _schema(["model", "policy", "spec", "reference", "X_I", "W"]),
    "library": _schema(["model", "policy", "spec", "stub", "X_I", "W", "C"], {
        "C": {"type": "integer", "minimum": 1},
        "max_attempts": {"type": "integer", "minimum": 1},
    }),
    "run": _schema(["model", "policy", "spec", "library", "stub", "X_I"], {
        "library": {"type": "string"},
        "draws": {"type": "integer", "minimum": 1},
    }),
    "coverage": _schema(["model", "policy", "spec", "stub", "X_I", "grid", "W"]),
    "sweep": _schema(["model", "train", "widths", "reference", "X_I", "W"], {
        "train": _TRAIN_BLOCK,
        "sampler": {"type": "object"},
        "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
        "layers": {"type": "integer", "minimum": 1},
    }),
}


# ---------------------------------------------------------------------------
# config resolution
# ---------------------------------------------------------------------------

class Context:
    """A validated config plus the directory its relative paths resolve against."""

    def __init__(self, command: str, cfg: dict, base: Path, out_dir: Path | None = None, jobs: int = 1):
        self.command = command
        self.cfg = cfg
        self.base = base
        self.jobs = jobs
        self.out = Path(out_dir) if out_dir else self.path(cfg.get("out_dir", f"{command}_out"))
        self.hash = config_hash(cfg)

    def path(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else (self.base / p)

    def meta(self) -> dict:
        return {"tool_version": __version__, "config_hash": self.hash}

    def model(self):
        m = self.cfg["model"]
        try:
            return make_model(m) if isinstance(m, str) else model_from_dict(m)
        except DynamicsError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def policy(self):
        p = self.path(self.cfg["policy"])
        if not p.exists():
            raise ConfigError(f"policy file {p} does not exist")
        return load_policy(p)

    def spec(self) -> SafetySpec:
        s = self.cfg["spec"]
        if isinstance(s, str):
            if not self.path(s).exists():
                raise ConfigError(f"spec file {self.path(s)} does not exist")
            return load_spec(self.path(s))
        return SafetySpec.from_dict(s)

    def reference(self, model) -> ReferenceTrajectory:
        r = self.cfg["reference"]
        if isinstance(r, str):
            return load_reference(self.path(r), model.state_dim, model.dt)
        if "states" in r:
            return ReferenceTrajectory.from_dict(r, model.state_dim)
        if "sampler_seed" in r:
            sampler = CurveSampler(model, **r.get("sampler", {}))
            return sampler(np.random.default_rng(int(r["sampler_seed"])))
        raise ConfigError("reference: give a file path, inline states, or a sampler_seed")

    def box(self, key, center=None) -> HyperRect:
        d = self.cfg[key]
        if "lo" in d:
            return HyperRect(d["lo"], d["hi"])
        c = d.get("center", center)
        if c is None:
            raise ConfigError(f"{key}: half_width needs a center (or a reference to center on)")
        c = np.asarray(c, dtype=np.float64)
        return HyperRect.from_center(c, np.broadcast_to(np.asarray(d["half_width"], dtype=np.float64), c.shape))

    def disturbance(self, n: int) -> HyperRect:
        W = self.box("W", np.zeros(n))
        if W.dim != n:
            raise ConfigError(f"W has {W.dim} dims, model has {n} states")
        return W

    def stub(self, model, spec) -> StubSource:
        s = self.cfg["stub"]
        modes = tuple(StubMode(m["name"], float(m["prob"]), float(m["side"])) for m in s.get("modes", [])) \
            or StubParams.__dataclass_fields__["modes"].default
        try:
            params = StubParams(model, int(s.get("K", self.cfg.get("K", 100))), modes, float(s.get("clearance", 0.5)),
                                float(s.get("via_sigma", 0.0)), float(s.get("jitter", 0.0)),
                                s.get("interp", "catmull_rom"), int(s.get("obstacle", 0)))
        except ValueError as exc:
            raise ConfigError(f"stub: {exc}") from exc
        return StubSource(spec, np.asarray(s["start"], dtype=np.float64), np.asarray(s["goal"], dtype=np.float64),
                          params)

    def write_json(self, name: str, payload: dict) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        p.write_text(json.dumps({**payload, "meta": self.meta()}, sort_keys=True, indent=1))
        return p

    def write_text(self, name: str, text: str) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        p = self.out / name
        p.write_text(text)
        return p

    def write_resolved(self) -> None:
        self.write_json("resolved_config.json", {"config": self.cfg, "command": self.command})


def _apply_seed_override(cfg: dict) -> dict:
    seed = os.environ.get("SAGE_SEED")
    if seed is None:
        return cfg
    try:
        s = int(seed)
    except ValueError as exc:
        raise ConfigError(f"SAGE_SEED must be an integer, got {seed!r}") from exc
    cfg = json.loads(json.dumps(cfg))
    cfg["seed"] = s
    if isinstance(cfg.get("train"), dict):
        cfg["train"]["seed"] = s
    return cfg


def load_context(command: str, config_path, out_dir=None, jobs: int = 1) -> Context:
    path = Path(config_path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file {path} does not exist") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = _apply_seed_override(cfg)
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from exc
    return Context(command, cfg, path.parent, out_dir, jobs)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _train_config(block: dict, seed) -> TrainConfig:
    block = dict(block)
    if seed is not None and "seed" not in block:
        block["seed"] = seed
    try:
        return TrainConfig.from_dict(block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc


def cmd_train(ctx: Context) -> int:
    model = ctx.model()
    cfg = _train_config(ctx.cfg["train"], ctx.cfg.get("seed"))
    sampler = CurveSampler(model, K=cfg.K, **ctx.cfg.get("sampler", {}))
    ctx.write_resolved()
    try:
        res = train_tracking_controller(model, cfg, sampler)
    except TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_UNSAFE
    ctx.out.mkdir(parents=True, exist_ok=True)
    save_policy(res.policy, ctx.out / "policy.json")
    ctx.write_text("train_log.csv", res.log_csv())
    ctx.write_json("train_summary.json", {"train_error": res.train_error, "val_error": res.val_error,
                                          "threshold": cfg.threshold, "threshold_met": res.threshold_met})
    log.info("validation tracking error %.4f (threshold %.3f)", res.val_error, cfg.threshold)
    return EXIT_OK


def cmd_verify(ctx: Context) -> int:
    model = ctx.model()
    policy = ctx.policy()
    spec = ctx.spec()
    tau = ctx.reference(model)
    X_I = ctx.box("X_I", tau.states[0])
    W = ctx.disturbance(model.state_dim)
    K = int(ctx.cfg.get("K", len(tau)))
    ctx.write_resolved()
    res = partition_and_verify(model, policy, tau, X_I, W, ctx.cfg.get("grid", 1), spec, ctx.cfg.get("N"), K,
                               False, ctx.jobs, ctx.cfg.get("intermediate", "crown"))
    payload = res.to_dict()
    payload["first_violation_k"] = res.first_violation_k
    ctx.write_json("rsoa.json", payload)
    ctx.write_text("boxes.csv", _stamp(boxes_csv(res.cells), ctx))
    log.info("verdict %s (%.2fs, %d cells)", res.status, res.wall_s, len(res.cells))
    if res.status == "unsafe" and res.first_violation_k:
        log.info("first violation at k=%d", res.first_violation_k)
    return STATUS_EXIT[res.status]


def cmd_library(ctx: Context) -> int:
    model, policy, spec = ctx.model(), ctx.policy(), ctx.spec()
    source = ctx.stub(model, spec)
    start = np.asarray(ctx.cfg["stub"]["start"], dtype=np.float64)
    X_I = ctx.box("X_I", _full_state(start, model, spec))
    W = ctx.disturbance(model.state_dim)
    C = int(ctx.cfg["C"])
    ctx.write_resolved()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        lib = build_library(source, model, policy, X_I, W, spec, C, ctx.cfg.get("max_attempts"),
                            seed=int(ctx.cfg.get("seed", 0)), K=source.params.K, N=ctx.cfg.get("N"),
                            grid=ctx.cfg.get("grid", 1), jobs=ctx.jobs,
                            intermediate=ctx.cfg.get("intermediate", "crown"))
    ctx.write_json("library.json", lib.to_dict())
    log.info("library: %d/%d entries, log %s", len(lib), C, lib.log.to_dict())
    return EXIT_OK if lib.complete else EXIT_UNSAFE


def _full_state(pos, model, spec) -> np.ndarray:
    if len(pos) == model.state_dim:
        return pos
    x = np.zeros(model.state_dim)
    x[list(spec.position_dims)] = pos
    return x


def cmd_run(ctx: Context) -> int:
    model, policy, spec = ctx.model(), ctx.policy(), ctx.spec()
    lib_path = ctx.path(ctx.cfg["library"])
    if not lib_path.exists():
        raise ConfigError(f"library file {lib_path} does not exist")
    try:
        lib = RsoaLibrary.load(lib_path, spec, policy)
    except LibraryError as exc:
        raise ConfigError(str(exc)) from exc
    if not len(lib):
        raise ConfigError("library has no entries")
    source = ctx.stub(model, spec)
    X_I = ctx.box("X_I", lib.entries[0].input_set.center)
    W = ctx.disturbance(model.state_dim) if "W" in ctx.cfg else None
    rng = np.random.default_rng(int(ctx.cfg.get("seed", 0)))
    ctx.write_resolved()
    runs = []
    for d in range(int(ctx.cfg.get("draws", 50))):
        x_I = X_I.sample(rng, 1)[0]
        try:
            tau = source(rng, start=x_I)
        except StubError as exc:
            runs.append({"draw": d, "error": str(exc)})
            continue
        w = None if W is None else rng.uniform(W.lower, W.upper, (lib.K, model.state_dim))
        xi, rep = execute_runtime(x_I, tau, lib, policy, model, w)
        e_xi = imitation_error(x_I, tau, lib, policy, model)
        runs.append({"draw": d, **rep.to_dict(), "E_xi": e_xi, "safe": bool(spec.trajectory_ok(xi))})
    ok = [r for r in runs if "error" not in r]
    e = np.array([r["E_xi"] for r in ok]) if ok else np.array([np.nan])
    summary = {"draws": len(runs), "median_E_xi": float(np.median(e)), "mean_E_xi": float(np.mean(e)),
               "certified_runs": sum(r["certified"] for r in ok),
               "violations": sum(r["certified"] and not r["all_contained"] for r in ok),
               "safe_fraction": float(np.mean([r["safe"] for r in ok])) if ok else float("nan")}
    for r in ok:
        del r["contained"]
    ctx.write_json("runs.json", {"summary": summary, "runs": runs})
    log.info("runtime summary %s", summary)
    return EXIT_OK if summary["violations"] == 0 else EXIT_UNSAFE


def cmd_coverage(ctx: Context, requery_spec=None, map_path=None) -> int:
    model, policy, spec = ctx.model(), ctx.policy(), ctx.spec()
    ctx.write_resolved()
    if map_path is not None:
        cmap = CoverageMap.from_dict(json.loads(Path(map_path).read_text()))
    else:
        source = ctx.stub(model, spec)
        X_I = ctx.box("X_I", _full_state(np.asarray(ctx.cfg["stub"]["start"], dtype=np.float64), model, spec))
        W = ctx.disturbance(model.state_dim)
        cmap = coverage_map(model, policy, source, X_I, ctx.cfg["grid"], W, spec, K=source.params.K,
                            N=ctx.cfg.get("N"), seed=int(ctx.cfg.get("seed", 0)), jobs=ctx.jobs,
                            intermediate=ctx.cfg.get("intermediate", "crown"))
        ctx.write_json("coverage.json", cmap.to_dict())
        log.info("coverage: %d/%d cells certified in %.2fs", len(cmap.safe_cells), len(cmap.cells), cmap.wall_s)
    if requery_spec is not None:
        new_spec = load_spec(requery_spec)
        t0 = time.perf_counter()
        safe = cmap.requery(new_spec)
        dt = time.perf_counter() - t0
        ctx.write_json("requery.json", {"safe_cells": safe, "wall_s": dt, "certification_wall_s": cmap.wall_s,
                                        "ratio": dt / cmap.wall_s if cmap.wall_s > 0 else None,
                                        "spec_hash": new_spec.digest()})
        log.info("requery: %d safe cells in %.4fs", len(safe), dt)
    statuses = {c.status for c in cmap.cells}
    if "unknown" in statuses:
        return EXIT_UNKNOWN
    return EXIT_OK if statuses == {"entry"} else EXIT_UNSAFE


def cmd_sweep(ctx: Context) -> int:
    model = ctx.model()
    base = dict(ctx.cfg["train"])
    layers = int(ctx.cfg.get("layers", 2))
    tau = ctx.reference(model)
    X_I = ctx.box("X_I", tau.states[0])
    W = ctx.disturbance(model.state_dim)
    K = int(ctx.cfg.get("K", len(tau)))
    spec = ctx.spec() if "spec" in ctx.cfg else None
    ctx.write_resolved()
    rows = []
    for width in ctx.cfg["widths"]:
        block = {**base, "hidden": [width] * layers, "max_hidden": max(base.get("max_hidden", 100), width * layers)}
        cfg = _train_config(block, ctx.cfg.get("seed"))
        sampler = CurveSampler(model, K=cfg.K, **ctx.cfg.get("sampler", {}))
        t0 = time.perf_counter()
        row = {"width": width, "hidden_neurons": width * layers}
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = train_tracking_controller(model, cfg, sampler)
        except TrainingDiverged as exc:
            rows.append({**row, "tracking_error": float("nan"), "final_volume": float("nan"),
                         "status": "diverged", "wall_s": time.perf_counter() - t0})
            log.warning("width %d diverged: %s", width, exc)
            continue
        save_policy(res.policy, _mkdir(ctx.out / "policies") / f"policy_w{width}.json")
        row["tracking_error"] = res.val_error
        try:
            rsoa = compute_rsoa(build_tnfl(model, res.policy, tau, K), X_I, W, ctx.cfg.get("N"),
                                ctx.cfg.get("intermediate", "crown"))
            row["final_volume"] = rsoa.final_volume
            row["status"] = "computed"
            if spec is not None:
                from .reach import check_specification
                row["status"] = check_specification(rsoa, spec).status
        except Exception as exc:  # unverifiable bounds count as infinite volume
            log.warning("width %d: bounds failed (%s)", width, exc)
            row["final_volume"] = float("inf")
            row["status"] = "unknown"
        row["wall_s"] = time.perf_counter() - t0
        rows.append(row)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["width", "hidden_neurons", "tracking_error", "final_volume", "status", "wall_s"]
    w.writerow(cols)
    for r in rows:
        w.writerow([r[c] if not isinstance(r[c], float) else repr(r[c]) for c in cols])
    ctx.write_text("sweep.csv", _stamp(buf.getvalue(), ctx))
    return EXIT_OK


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def _stamp(csv_text: str, ctx: Context) -> str:
    return f"# trackcert {__version__} config {ctx.hash}\n" + csv_text


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _collect(payload: dict, name: str):
    """(box groups, trajectories) from any artifact this tool writes."""
    groups, trajs = [], []
    if "cells" in payload and "grid" in payload:  # coverage map
        for c in payload["cells"]:
            groups.append((f"{name}:cell{c['index']}", RsoaResult.from_dict({"mode": 0, "boxes": c["boxes"]}).boxes))
            if "tau" in c:
                trajs.append((f"{name}:tau{c['index']}", np.asarray(c["tau"]["states"])))
    elif "cells" in payload:  # partitioned verification
        for c in payload["cells"]:
            groups.append((f"{name}:p{c['partition']}", RsoaResult.from_dict(c).boxes))
    elif "entries" in payload:  # library
        for i, e in enumerate(payload["entries"]):
            groups.append((f"{name}:e{i}", RsoaResult.from_dict({"mode": 0, "boxes": e["boxes"]}).boxes))
            trajs.append((f"{name}:tau{i}", np.asarray(e["tau"]["states"])))
    elif "boxes" in payload:
        groups.append((name, RsoaResult.from_dict(payload).boxes))
    elif "states" in payload:
        trajs.append((name, np.asarray(payload["states"])))
    return groups, trajs


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def render_svg(spec: SafetySpec | None, groups, trajs, size: int = 600) -> str:
    """Layered SVG over the position plane: spec geometry, boxes, trajectories."""
    dims = list(spec.position_dims[:2]) if spec is not None else [0, 1]
    if spec is not None:
        lo, hi = spec.workspace.lower[:2], spec.workspace.upper[:2]
    else:
        pts = [b.lower[dims] for _, bs in groups for b in bs] + [b.upper[dims] for _, bs in groups for b in bs]
        pts += [t[:, dims] for _, t in trajs]
        allp = np.vstack(pts) if pts else np.array([[0.0, 0.0], [1.0, 1.0]])
        lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = np.maximum(hi - lo, 1e-9)
    s = size / float(span.max())

    def X(v):
        return (v - lo[0]) * s

    def Y(v):
        return size - (v - lo[1]) * s

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">']
    out.append('<g id="spec">')
    if spec is not None:
        out.append(f'<rect x="0" y="0" width="{_fmt(span[0] * s)}" height="{_fmt(span[1] * s)}" '
                   'fill="none" stroke="black"/>')
        if spec.goal is not None:
            g = spec.goal
            out.append(f'<rect class="goal" x="{_fmt(X(g.lower[0]))}" y="{_fmt(Y(g.upper[1]))}" '
                       f'width="{_fmt(g.width[0] * s)}" height="{_fmt(g.width[1] * s)}" fill="green" '
                       'fill-opacity="0.2"/>')
        for o in spec.obstacles:
            out.append(f'<circle class="obstacle" cx="{_fmt(X(o.center[0]))}" cy="{_fmt(Y(o.center[1]))}" '
                       f'r="{_fmt(o.radius * s)}" fill="red" fill-opacity="0.5"/>')
    out.append("</g>")
    out.append('<g id="boxes">')
    for name, boxes in groups:
        for b in boxes:
            out.append(f'<rect class="box" data-src="{name}" x="{_fmt(X(b.lower[dims[0]]))}" '
                       f'y="{_fmt(Y(b.upper[dims[1]]))}" width="{_fmt(b.width[dims[0]] * s)}" '
                       f'height="{_fmt(b.width[dims[1]] * s)}" fill="none" stroke="blue" stroke-width="0.5"/>')
    out.append("</g>")
    out.append('<g id="trajectories">')
    for name, t in trajs:
        pts = " ".join(f"{_fmt(X(p[dims[0]]))},{_fmt(Y(p[dims[1]]))}" for p in t)
        out.append(f'<polyline data-src="{name}" points="{pts}" fill="none" stroke="black"/>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def export_plots(inputs, out_dir, spec_path=None) -> tuple[Path, Path]:
    spec = load_spec(spec_path) if spec_path else None
    groups, trajs = [], []
    for p in inputs:
        p = Path(p)
        g, t = _collect(json.loads(p.read_text()), p.stem)
        groups += g
        trajs += t
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = max((b.dim for _, bs in groups for b in bs), default=0)
    w.writerow(["source", "k"] + [f"lo_{i}" for i in range(n)] + [f"hi_{i}" for i in range(n)])
    for name, boxes in groups:
        for k, b in enumerate(boxes):
            w.writerow([name, k + 1] + [repr(float(v)) for v in b.lower] + [repr(float(v)) for v in b.upper])
    csv_path = out / "boxes.csv"
    csv_path.write_text(buf.getvalue())
    svg_path = out / "plot.svg"
    svg_path.write_text(render_svg(spec, groups, trajs))
    return svg_path, csv_path


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {"train": cmd_train, "verify": cmd_verify, "library": cmd_library, "run": cmd_run,
            "coverage": cmd_coverage, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackcert", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"trackcert {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("config")
        sp.add_argument("--out", help="output directory (overrides out_dir)")
        sp.add_argument("--jobs", type=int, default=1, help="worker process cap")
        if name == "coverage":
            sp.add_argument("--requery", help="spec file to re-check stored boxes against")
            sp.add_argument("--map", help="existing coverage.json; skips certification")
    ex = sub.add_parser("export")
    ex.add_argument("inputs", nargs="*", help="result files (rsoa, library, coverage, reference)")
    ex.add_argument("--spec")
    ex.add_argument("--out", default="export_out")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "export":
            export_plots(args.inputs, args.out, args.spec)
            return EXIT_OK
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        ctx = load_context(args.command, args.config, args.out, args.jobs)
        if args.command == "coverage":
            return cmd_coverage(ctx, args.requery, args.map)
        return COMMANDS[args.command](ctx)
    except (ConfigError, SpecError, ReferenceFormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"trackcert: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
