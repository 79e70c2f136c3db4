"""Discrete-time robot models: x' = x + dt * f(x, u) + w.

All vector fields are written once against the polymorphic primitives in
:mod:`trackcert.numeric.graph`, so the same code evaluates numpy batches,
records training tapes, and builds verification graphs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .numeric import graph as G
from .numeric.mlp import MlpParams, mlp_forward


class DynamicsError(ValueError):
    pass


_DIMS = {
    # kind: (state_dim, control_dim, position dims)
    "unicycle3": (3, 2, (0, 1)),
    "unicycle4": (4, 2, (0, 1)),
    "planar_quad": (6, 2, (0, 1)),
    "quad3d": (12, 4, (0, 1, 2)),
}

_DEFAULTS = {
    "unicycle3": {"dt": 0.1},
    "unicycle4": {"dt": 0.1},
    "planar_quad": {"dt": 0.05, "m": 0.5, "g": -9.81, "Iy": 0.01},
    "quad3d": {"dt": 0.05, "m": 1.0, "g": -9.81, "Ix": 0.5, "Iy": 0.1, "Iz": 0.3},
    "single_integrator": {"dt": 0.1, "dim": 2},
    "learned_mlp": {"dt": 0.1},
}

_POSITIVE = ("m", "Ix", "Iy", "Iz")


@dataclass(frozen=True)
class DynamicsModel:
    kind: str
    dt: float
    params: dict = field(default_factory=dict)
    learned: MlpParams | None = None
    base: str | None = None  # analytic model a learned_mlp imitates
    angle_margin: float = 0.2

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise DynamicsError(f"unknown dynamics kind {self.kind!r}")
        if not self.dt > 0:
            raise DynamicsError(f"dt must be positive, got {self.dt}")
        for k in _POSITIVE:
            if k in self.params and not self.params[k] > 0:
                raise DynamicsError(f"parameter {k} must be positive, got {self.params[k]}")
        if self.kind == "learned_mlp":
            if self.learned is None or self.base not in _DIMS:
                raise DynamicsError("learned_mlp needs MLP parameters and an analytic base kind")
            n, m, _ = _DIMS[self.base]
            if self.learned.in_dim != n + m or self.learned.out_dim != n:
                raise DynamicsError(
                    f"learned model maps {self.learned.in_dim} -> {self.learned.out_dim}, "
                    f"expected {n + m} -> {n}"
                )

    @property
    def state_dim(self) -> int:
        if self.kind == "single_integrator":
            return int(self.params.get("dim", 2))
        return _DIMS[self.base if self.kind == "learned_mlp" else self.kind][0]

    @property
    def control_dim(self) -> int:
        if self.kind == "single_integrator":
            return self.state_dim
        return _DIMS[self.base if self.kind == "learned_mlp" else self.kind][1]

    @property
    def disturbance_dim(self) -> int:
        return self.state_dim

    @property
    def position_dims(self) -> tuple:
        if self.kind == "single_integrator":
            return tuple(range(self.state_dim))
        return _DIMS[self.base if self.kind == "learned_mlp" else self.kind][2]

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"kind": self.kind, "dt": self.dt, **self.params}
        if self.kind == "learned_mlp":
            d["base"] = self.base
            d["mlp"] = self.learned.to_dict()
        return d


def make_model(kind: str, **overrides) -> DynamicsModel:
    if kind not in _DEFAULTS:
        raise DynamicsError(f"unknown dynamics kind {kind!r}")
    cfg = {**_DEFAULTS[kind], **overrides}
    dt = float(cfg.pop("dt"))
    learned = cfg.pop("mlp", None)
    base = cfg.pop("base", None)
    margin = float(cfg.pop("angle_margin", 0.2))
    if isinstance(learned, dict):
        learned = MlpParams.from_dict(learned)
    return DynamicsModel(kind, dt, {k: float(v) for k, v in cfg.items()}, learned, base, margin)


def model_from_dict(d: dict) -> DynamicsModel:
    d = dict(d)
    return make_model(d.pop("kind"), **d)


def model_from_json(text: str) -> DynamicsModel:
    return model_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# vector fields
# ---------------------------------------------------------------------------

def _c(x, i):
    return G.take(x, i)


def _unicycle3(x, u, p):
    th, v, om = _c(x, 2), _c(u, 0), _c(u, 1)
    return G.concat([v * np.cos(th), v * np.sin(th), om])


def _unicycle4(x, u, p):
    th, v = _c(x, 2), _c(x, 3)
    om, acc = _c(u, 0), _c(u, 1)
    return G.concat([v * np.cos(th), v * np.sin(th), om, acc])


def _planar_quad(x, u, p):
    th = _c(x, 2)
    thrust = _c(u, 0) * (1.0 / p["m"])
    return G.concat([
        G.take(x, 3, 6),
        -(thrust * np.sin(th)),
        thrust * np.cos(th) + p["g"],
        _c(u, 1) * (1.0 / p["Iy"]),
    ])


def _quad3d(x, u, p):
    # state: x y z psi theta phi vx vy vz p q r
    psi, th, phi = _c(x, 3), _c(x, 4), _c(x, 5)
    pr, qr, rr = _c(x, 9), _c(x, 10), _c(x, 11)
    Ix, Iy, Iz, m = p["Ix"], p["Iy"], p["Iz"], p["m"]
    sphi, cphi = np.sin(phi), np.cos(phi)
    sth, tth = np.sin(th), np.tan(th)
    sec = 1.0 / np.cos(th)
    spsi, cpsi = np.sin(psi), np.cos(psi)
    thrust = _c(u, 0) * (1.0 / m)
    qs, rc = qr * sphi, rr * cphi
    return G.concat([
        G.take(x, 6, 9),
        (qs + rc) * sec,
        qr * cphi - rr * sphi,
        pr + (qs + rc) * tth,
        thrust * (sphi * spsi + cphi * cpsi * sth),
        thrust * (cpsi * sphi - cphi * spsi * sth),
        thrust * (cphi * np.cos(th)) + p["g"],
        (qr * rr) * ((Iy - Iz) / Ix) + _c(u, 1) * (1.0 / Ix),
        (pr * rr) * ((Iz - Ix) / Iy) + _c(u, 2) * (1.0 / Iy),
        (pr * qr) * ((Ix - Iy) / Iz) + _c(u, 3) * (1.0 / Iz),
    ])


def _single_integrator(x, u, p):
    return u


_FIELDS = {
    "unicycle3": _unicycle3,
    "unicycle4": _unicycle4,
    "planar_quad": _planar_quad,
    "quad3d": _quad3d,
    "single_integrator": _single_integrator,
}


def _check_dims(model: DynamicsModel, x, u):
    n, m = model.state_dim, model.control_dim
    xs, us = G.value_of(x).shape, G.value_of(u).shape
    if xs[-1:] != (n,):
        raise DynamicsError(f"{model.kind}: state has width {xs[-1:]}, expected {n}")
    if us[-1:] != (m,):
        raise DynamicsError(f"{model.kind}: control has width {us[-1:]}, expected {m}")


def check_attitude(model: DynamicsModel, x) -> None:
    """Singularity guard for the Euler-angle quadrotor: |theta| < pi/2 - margin."""
    if model.kind != "quad3d" and not (model.kind == "learned_mlp" and model.base == "quad3d"):
        return
    th = G.value_of(x)[..., 4]
    lim = math.pi / 2 - model.angle_margin
    if np.any(~(np.abs(th) < lim)):
        raise DynamicsError(f"pitch angle {np.max(np.abs(th)):.4f} rad outside guard |theta| < {lim:.4f}")


def eval_continuous(model: DynamicsModel, x, u, guard: bool = True):
    """Continuous-time vector field f(x, u)."""
    _check_dims(model, x, u)
    if guard:
        check_attitude(model, x)
    if model.kind == "learned_mlp":
        return mlp_forward(model.learned, G.concat([x, u]))
    return _FIELDS[model.kind](x, u, model.params)


def step_discrete(model: DynamicsModel, x, u, w=None, guard: bool = True):
    """Forward-Euler step with the disturbance added after integration."""
    xn = x + eval_continuous(model, x, u, guard) * model.dt
    if w is not None:
        if G.value_of(w).shape[-1:] != (model.disturbance_dim,):
            raise DynamicsError(f"disturbance width {G.value_of(w).shape[-1:]} != {model.disturbance_dim}")
        xn = xn + w
    return xn


class RolloutError(DynamicsError):
    def __init__(self, step: int, cause: Exception):
        super().__init__(f"rollout failed at timestep {step}: {cause}")
        self.step = step
        self.cause = cause


def rollout(model: DynamicsModel, policy, x_I, tau_padded, w_seq=None, K: int | None = None,
            guard: bool = True, return_controls: bool = False):
    """Closed-loop trajectory x_1..x_K tracking a padded reference.

    ``x_I`` may be a single state ``(n,)`` or a batch ``(B, n)``;
    ``tau_padded`` is ``(K+N, n)`` or ``(B, K+N, n)``; ``w_seq`` is
    ``(K, n)``/``(B, K, n)`` or None for no disturbance.  With graph nodes as
    inputs the rollout is recorded and stays differentiable.
    """
    from .controller import build_error_window, policy_control

    tau_padded = np.asarray(tau_padded, dtype=np.float64)
    if K is None:
        K = tau_padded.shape[-2] - policy.N
    if K < 1 or tau_padded.shape[-2] < K + policy.N:
        raise DynamicsError(f"reference of length {tau_padded.shape[-2]} cannot support K={K}, N={policy.N}")
    w_arr = None if w_seq is None or G.is_node(w_seq) or isinstance(w_seq, (list, tuple)) else np.asarray(w_seq)
    if w_arr is not None and w_arr.shape[-2] < K:
        raise DynamicsError(f"disturbance sequence has {w_arr.shape[-2]} steps, need {K}")
    x = x_I
    states, controls = [], []
    for k in range(K):
        try:
            e = build_error_window(x, tau_padded, k, policy.N)
            u = policy_control(policy, e)
            if w_seq is None:
                w = None
            elif isinstance(w_seq, (list, tuple)):
                w = w_seq[k]
            else:
                w = w_arr[..., k, :]
            x = step_discrete(model, x, u, w, guard)
        except (DynamicsError, FloatingPointError) as exc:
            raise RolloutError(k + 1, exc) from exc
        states.append(x)
        controls.append(u)
    if G.is_node(x) or any(G.is_node(s) for s in states):
        out = states
    else:
        out = np.stack(states, axis=-2)
        controls = np.stack(controls, axis=-2)
    return (out, controls) if return_controls else out


# ---------------------------------------------------------------------------
# reference lifting: position paths -> full reference states
# ---------------------------------------------------------------------------

def _grad(a, dt):
    if len(a) < 2:
        return np.zeros_like(a)
    return np.gradient(a, dt, axis=0)


def lift_positions(model: DynamicsModel, pos: np.ndarray, dt: float | None = None) -> np.ndarray:
    """Fill non-position reference components from a position path.

    Headings come from the path tangent, velocities from finite differences,
    and quadrotor attitudes from the thrust direction needed for the path's
    acceleration (differential flatness).
    """
    pos = np.asarray(pos, dtype=np.float64)
    dt = model.dt if dt is None else dt
    kind = model.base if model.kind == "learned_mlp" else model.kind
    vel = _grad(pos, dt)
    if kind in ("unicycle3", "unicycle4"):
        if len(pos) > 1:
            heading = np.unwrap(np.arctan2(vel[:, 1], vel[:, 0]))
        else:
            heading = np.zeros(1)
        cols = [pos[:, 0], pos[:, 1], heading]
        if kind == "unicycle4":
            cols.append(np.hypot(vel[:, 0], vel[:, 1]))
        return np.stack(cols, axis=1)
    if kind == "planar_quad":
        g = model.params.get("g", -9.81)
        acc = _grad(vel, dt)
        th = np.arctan2(-acc[:, 0], acc[:, 1] - g)
        om = _grad(th, dt)
        return np.column_stack([pos[:, 0], pos[:, 1], th, vel[:, 0], vel[:, 1], om])
    if kind == "quad3d":
        g = model.params.get("g", -9.81)
        acc = _grad(vel, dt)
        th = np.arctan2(acc[:, 0], acc[:, 2] - g)
        phi = np.arctan2(acc[:, 1], np.hypot(acc[:, 0], acc[:, 2] - g))
        zeros = np.zeros(len(pos))
        return np.column_stack([pos, zeros, th, phi, vel, _grad(phi, dt), _grad(th, dt), zeros])
    if kind == "single_integrator":
        return pos
    raise DynamicsError(f"cannot lift positions for {kind!r}")
