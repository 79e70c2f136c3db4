"""Reference trajectories and the smooth-curve machinery used to make them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SOURCES = ("diffusion", "cfm", "vlm", "node", "stub", "random")


class ReferenceFormatError(ValueError):
    pass


@dataclass
class ReferenceTrajectory:
    """``states[k]`` is reference point p_{k+1}; shape (K, n)."""

    states: np.ndarray
    dt: float
    source: str = "stub"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        if len(self.states) < 1:
            raise ReferenceFormatError("a reference needs at least one point")
        if not self.dt > 0:
            raise ReferenceFormatError(f"dt must be positive, got {self.dt}")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def to_dict(self) -> dict:
        d = {"dt": self.dt, "source": self.source, "states": self.states.tolist()}
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict, state_dim: int | None = None) -> "ReferenceTrajectory":
        for key in ("dt", "states"):
            if key not in d:
                raise ReferenceFormatError(f"reference file missing field {key!r}")
        source = d.get("source", "stub")
        if source not in SOURCES:
            raise ReferenceFormatError(f"field 'source': unknown tag {source!r}")
        try:
            states = np.asarray(d["states"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise ReferenceFormatError(f"field 'states': {exc}") from exc
        if states.ndim != 2 or len(states) == 0:
            raise ReferenceFormatError("field 'states' must be a non-empty list of equal-length rows")
        if state_dim is not None and states.shape[1] != state_dim:
            raise ReferenceFormatError(
                f"field 'states': rows have width {states.shape[1]}, model expects {state_dim}"
            )
        if not np.all(np.isfinite(states)):
            raise ReferenceFormatError("field 'states' contains non-finite values")
        return cls(states, float(d["dt"]), source, d.get("meta", {}))


def save_reference(ref: ReferenceTrajectory, path) -> None:
    Path(path).write_text(json.dumps(ref.to_dict()))


def load_reference(path, state_dim: int | None = None, dt: float | None = None) -> ReferenceTrajectory:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ReferenceFormatError(f"{path}: not valid JSON ({exc})") from exc
    ref = ReferenceTrajectory.from_dict(d, state_dim)
    if dt is not None and abs(ref.dt - dt) > 1e-12:
        raise ReferenceFormatError(f"field 'dt': reference has dt={ref.dt}, model uses {dt}")
    return ref


def catmull_rom(points: np.ndarray, samples_per_segment: int = 64) -> np.ndarray:
    """Dense uniform Catmull-Rom curve through ``points`` (endpoints included)."""
    P = np.asarray(points, dtype=np.float64)
    if len(P) == 1:
        return P.copy()
    ext = np.vstack([2 * P[0] - P[1], P, 2 * P[-1] - P[-2]])
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    out = []
    for i in range(1, len(ext) - 2):
        p0, p1, p2, p3 = ext[i - 1], ext[i], ext[i + 1], ext[i + 2]
        out.append(0.5 * (2 * p1 + (-p0 + p2) * t + (2 * p0 - 5 * p1 + 4 * p2 - p3) * t**2
                          + (-p0 + 3 * p1 - 3 * p2 + p3) * t**3))
    out.append(P[-1:])
    return np.vstack(out)


def polyline(points: np.ndarray, samples_per_segment: int = 64) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    if len(P) == 1:
        return P.copy()
    t = np.linspace(0.0, 1.0, samples_per_segment, endpoint=False)[:, None]
    segs = [P[i] + (P[i + 1] - P[i]) * t for i in range(len(P) - 1)]
    return np.vstack(segs + [P[-1:]])


def resample_arclength(curve: np.ndarray, K: int) -> np.ndarray:
    """``K`` points equally spaced in arc length, first and last kept exactly."""
    curve = np.asarray(curve, dtype=np.float64)
    if K == 1:
        return curve[-1:].copy()
    seg = np.linalg.norm(np.diff(curve, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0.0:
        return np.repeat(curve[:1], K, axis=0)
    targets = np.linspace(0.0, s[-1], K)
    out = np.column_stack([np.interp(targets, s, curve[:, j]) for j in range(curve.shape[1])])
    out[0], out[-1] = curve[0], curve[-1]
    return out


def smooth_path(waypoints, K: int, interp: str = "catmull_rom") -> np.ndarray:
    dense = catmull_rom(waypoints) if interp == "catmull_rom" else polyline(waypoints)
    return resample_arclength(dense, K)
