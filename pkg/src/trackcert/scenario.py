"""Safety specifications and reference sources (files and a multimodal planner stub)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bounds.box import HyperRect
from .dynamics import DynamicsModel, lift_positions
from .reference import (  # noqa: F401  re-exported ingestion helpers
    ReferenceFormatError,
    ReferenceTrajectory,
    load_reference,
    save_reference,
    smooth_path,
)


class SpecError(ValueError):
    pass


class StubError(RuntimeError):
    """The stub could not place a feasible via-point."""


@dataclass(frozen=True)
class Obstacle:
    center: tuple
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise SpecError(f"obstacle radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    def to_dict(self) -> dict:
        return {"c": list(self.center), "r": self.radius}


def box_obstacle_collision(box: HyperRect, obstacle: Obstacle) -> bool:
    """True iff the closest box point is within ``radius`` (tangency collides)."""
    c = np.asarray(obstacle.center)
    if len(c) != box.dim:
        raise SpecError(f"obstacle has {len(c)} dims, box has {box.dim}")
    nearest = np.clip(c, box.lower, box.upper)
    return bool(np.linalg.norm(nearest - c) <= obstacle.radius)


@dataclass
class SafetySpec:
    workspace: HyperRect  # over position dims
    obstacles: list = field(default_factory=list)
    goal: HyperRect | None = None  # over goal_dims
    position_dims: tuple = (0, 1)
    goal_dims: tuple | None = None  # defaults to position_dims
    state_bounds: HyperRect | None = None  # optional full-state box

    def __post_init__(self):
        self.position_dims = tuple(int(i) for i in self.position_dims)
        self.goal_dims = self.position_dims if self.goal_dims is None else tuple(int(i) for i in self.goal_dims)
        self.obstacles = [o if isinstance(o, Obstacle) else Obstacle(o["c"], o["r"]) for o in self.obstacles]
        if self.workspace.dim != len(self.position_dims):
            raise SpecError("workspace dims must match position_dims")
        if np.any(self.workspace.width <= 0):
            raise SpecError("workspace must have positive extent in every dim")
        if self.goal is not None and self.goal.dim != len(self.goal_dims):
            raise SpecError("goal box dims must match goal_dims")
        for o in self.obstacles:
            if len(o.center) != len(self.position_dims):
                raise SpecError("obstacle centers must have one coordinate per position dim")

    # ---- set queries -------------------------------------------------------
    def box_safe(self, box: HyperRect) -> bool:
        pos = box.restrict(self.position_dims)
        if not pos.subset_of(self.workspace):
            return False
        if any(box_obstacle_collision(pos, o) for o in self.obstacles):
            return False
        if self.state_bounds is not None and not box.subset_of(self.state_bounds):
            return False
        return True

    def box_in_goal(self, box: HyperRect) -> bool:
        if self.goal is None:
            return True
        return box.restrict(self.goal_dims).subset_of(self.goal)

    def points_safe(self, states) -> np.ndarray:
        """Per-point safety for states ``(..., n)``: strictly outside obstacles."""
        states = np.asarray(states, dtype=np.float64)
        pos = states[..., list(self.position_dims)]
        ok = self.workspace.contains(pos)
        for o in self.obstacles:
            ok &= np.linalg.norm(pos - np.asarray(o.center), axis=-1) > o.radius
        if self.state_bounds is not None:
            ok &= self.state_bounds.contains(states)
        return ok

    def points_in_goal(self, states) -> np.ndarray:
        states = np.asarray(states, dtype=np.float64)
        if self.goal is None:
            return np.ones(states.shape[:-1], dtype=bool)
        return self.goal.contains(states[..., list(self.goal_dims)])

    def trajectory_ok(self, states) -> np.ndarray:
        """Reach-avoid check for trajectories ``(..., K, n)``."""
        states = np.asarray(states, dtype=np.float64)
        return np.all(self.points_safe(states), axis=-1) & self.points_in_goal(states[..., -1, :])

    # ---- serialization -----------------------------------------------------
    def to_dict(self) -> dict:
        d = {
            "workspace": self.workspace.to_dict(),
            "obstacles": [o.to_dict() for o in self.obstacles],
            "position_dims": list(self.position_dims),
        }
        if self.goal is not None:
            d["goal"] = self.goal.to_dict()
        if self.goal_dims != self.position_dims:
            d["goal_dims"] = list(self.goal_dims)
        if self.state_bounds is not None:
            d["state_bounds"] = self.state_bounds.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SafetySpec":
        try:
            return cls(
                HyperRect.from_dict(d["workspace"]),
                [Obstacle(o["c"], float(o["r"])) for o in d.get("obstacles", [])],
                HyperRect.from_dict(d["goal"]) if "goal" in d else None,
                tuple(d.get("position_dims", (0, 1))),
                tuple(d["goal_dims"]) if "goal_dims" in d else None,
                HyperRect.from_dict(d["state_bounds"]) if "state_bounds" in d else None,
            )
        except KeyError as exc:
            raise SpecError(f"spec file missing field {exc.args[0]!r}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def with_obstacles(self, obstacles) -> "SafetySpec":
        return SafetySpec(self.workspace, list(obstacles), self.goal, self.position_dims,
                          self.goal_dims, self.state_bounds)


def load_spec(path) -> SafetySpec:
    return SafetySpec.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# multimodal planner stub
# ---------------------------------------------------------------------------

@dataclass
class StubMode:
    name: str
    prob: float
    side: float  # +1 passes on the left of the start->goal direction, -1 on the right


@dataclass
class StubParams:
    model: DynamicsModel
    K: int = 100
    modes: tuple = (StubMode("above", 0.5, 1.0), StubMode("below", 0.5, -1.0))
    clearance: float = 0.5  # via-point distance from the obstacle surface
    via_sigma: float = 0.0  # random offset of the via-point
    jitter: float = 0.0  # i.i.d. Gaussian noise per reference point on position dims
    interp: str = "catmull_rom"
    obstacle: int = 0  # which obstacle the modes go around
    max_tries: int = 50

    def __post_init__(self):
        probs = np.array([m.prob for m in self.modes])
        if np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
            raise ValueError("mode probabilities must be non-negative and sum to 1")


def _via_point(spec: SafetySpec, start, goal, mode: StubMode, params: StubParams, rng):
    d = goal - start
    normal = np.zeros_like(d)
    normal[0], normal[1] = -d[1], d[0]
    nn = np.linalg.norm(normal)
    normal = normal / nn if nn > 0 else np.eye(len(d))[1]
    if spec.obstacles:
        ob = spec.obstacles[params.obstacle]
        base = np.asarray(ob.center) + mode.side * (ob.radius + params.clearance) * normal
    else:
        base = 0.5 * (start + goal) + mode.side * params.clearance * normal
    if params.via_sigma > 0:
        base = base + rng.normal(0.0, params.via_sigma, base.shape)
    return base


def stub_sample(spec: SafetySpec, start, goal, params: StubParams, rng: np.random.Generator,
                return_mode: bool = False):
    """One reference from the multimodal stub.

    A mode (side of the obstacle) is drawn with the configured probabilities,
    a via-point is placed beside the obstacle, and a smooth path
    start -> via -> goal is resampled to K points.  With zero jitter the
    path is checked against ``spec``; a colliding draw of the via-point is
    redrawn up to ``max_tries`` times before giving up.
    """
    dims = list(spec.position_dims)
    start = np.asarray(start, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    start = start[dims] if len(start) > len(dims) else start
    goal = goal[dims] if len(goal) > len(dims) else goal
    if not (spec.workspace.contains(start) and spec.workspace.contains(goal)):
        raise StubError("start and goal must lie inside the workspace")

    probs = np.array([m.prob for m in params.modes])
    idx = int(rng.choice(len(params.modes), p=probs))
    mode = params.modes[idx]
    for _ in range(params.max_tries):
        via = _via_point(spec, start, goal, mode, params, rng)
        if not spec.workspace.contains(via):
            continue
        pos = smooth_path(np.stack([start, via, goal]), params.K, params.interp)
        if np.all(_pos_safe(spec, pos)):
            break
    else:
        raise StubError(f"no feasible via-point for mode {mode.name!r} inside the workspace")

    states = lift_positions(params.model, pos)
    if params.jitter > 0:
        noise = rng.normal(0.0, params.jitter, (params.K, len(dims)))
        states[:, dims] += noise
    ref = ReferenceTrajectory(states, params.model.dt, "stub", {"mode": mode.name})
    return (ref, mode.name) if return_mode else ref


def _pos_safe(spec: SafetySpec, pos):
    ok = spec.workspace.contains(pos)
    for o in spec.obstacles:
        ok &= np.linalg.norm(pos - np.asarray(o.center), axis=-1) > o.radius
    return ok
