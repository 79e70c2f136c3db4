"""Trajectory-conditioned tracking controller: error windows, losses, training."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .dynamics import DynamicsModel, lift_positions, rollout
from .numeric import graph as G
from .numeric.graph import Graph
from .numeric.mlp import MlpParams, init_mlp, mlp_forward
from .numeric.optim import NonFiniteGradient, OptimizerConfig, OptimizerState, optimizer_step
from .reference import ReferenceTrajectory, smooth_path

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrackingPolicy:
    params: MlpParams
    N: int
    state_dim: int
    control_dim: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.params.in_dim != self.N * self.state_dim:
            raise ValueError(
                f"policy input width {self.params.in_dim} != N*n = {self.N}*{self.state_dim}"
            )
        if self.params.out_dim != self.control_dim:
            raise ValueError(f"policy output width {self.params.out_dim} != control_dim {self.control_dim}")

    @property
    def hidden_neurons(self) -> int:
        return self.params.hidden_neurons

    def to_dict(self) -> dict:
        d = self.params.to_dict()
        d.update({"N": self.N, "state_dim": self.state_dim, "control_dim": self.control_dim})
        if self.meta:
            d["meta"] = self.meta
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrackingPolicy":
        return cls(MlpParams.from_dict(d), int(d["N"]), int(d["state_dim"]), int(d["control_dim"]),
                   d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        body = self.params.to_dict()
        body.update({"N": self.N, "state_dim": self.state_dim, "control_dim": self.control_dim})
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def load_policy(path) -> TrackingPolicy:
    return TrackingPolicy.from_dict(json.loads(Path(path).read_text()))


def save_policy(policy: TrackingPolicy, path) -> None:
    Path(path).write_text(policy.to_json())


def pad_reference(tau, K: int, N: int) -> np.ndarray:
    """First K points of ``tau`` followed by copies of p_K, length K+N."""
    states = tau.states if isinstance(tau, ReferenceTrajectory) else np.asarray(tau, dtype=np.float64)
    states = np.atleast_2d(states)
    if len(states) < 1:
        raise ValueError("cannot pad an empty reference")
    head = states[:K]
    fill = np.repeat(head[-1:], K + N - len(head), axis=0)
    return np.concatenate([head, fill], axis=0)


def _window_matrix(n: int, N: int) -> np.ndarray:
    return -np.tile(np.eye(n), (N, 1))


def build_error_window(x, tau_padded, k: int, N: int):
    """e_k = [p_{k+1} - x, ..., p_{k+N} - x], time-major, for 0-based step k.

    ``tau_padded[j]`` holds p_{j+1}.  Works on single states, batches and
    graph nodes (as one affine node).
    """
    tau_padded = np.asarray(tau_padded, dtype=np.float64)
    if k < 0 or k + N > tau_padded.shape[-2]:
        raise IndexError(f"window [{k}, {k + N}) exceeds padded reference of length {tau_padded.shape[-2]}")
    n = tau_padded.shape[-1]
    window = tau_padded[..., k:k + N, :]
    flat = window.reshape(window.shape[:-2] + (N * n,))
    return G.affine(x, _window_matrix(n, N), flat)


def policy_control(policy: TrackingPolicy, e):
    return mlp_forward(policy.params, e)


def losses(states, controls, targets, bounds: dict):
    """(L_track, L_state, L_ctrl) over an N-step window.

    ``states``/``controls`` are lists of per-step values (arrays or nodes,
    optionally batched); ``targets`` is ``(..., N, n)``.  Penalty terms are
    summed over components, averaged over the horizon (and batch).
    """
    N = len(states)
    S = G.concat(states)
    U = G.concat(controls)
    targets = np.asarray(targets, dtype=np.float64)
    T = targets.reshape(targets.shape[:-2] + (-1,))
    batch = int(np.prod(G.value_of(S).shape[:-1])) if G.value_of(S).ndim > 1 else 1
    norm = 1.0 / (N * batch)

    x_lo = np.tile(np.asarray(bounds["x_L"], dtype=np.float64), N)
    x_hi = np.tile(np.asarray(bounds["x_U"], dtype=np.float64), N)
    u_lo = np.tile(np.asarray(bounds["u_L"], dtype=np.float64), N)
    u_hi = np.tile(np.asarray(bounds["u_U"], dtype=np.float64), N)

    l_track = G.reduce_sum(G.square(S - T)) * norm
    l_state = (G.reduce_sum(G.softplus(S - x_hi)) + G.reduce_sum(G.softplus(x_lo - S))) * norm
    l_ctrl = (G.reduce_sum(G.softplus(U - u_hi)) + G.reduce_sum(G.softplus(u_lo - U))) * norm
    return l_track, l_state, l_ctrl


# ---------------------------------------------------------------------------
# training references
# ---------------------------------------------------------------------------

@dataclass
class CurveSampler:
    """Random smooth references: jittered waypoints along a random direction."""

    model: DynamicsModel
    K: int = 100
    start_lo: tuple = (-2.5, -1.0)
    start_hi: tuple = (-1.5, 1.0)
    heading: float = 0.0
    heading_spread: float = 0.5
    length: tuple = (3.0, 5.0)
    waypoints: int = 4
    lateral: float = 0.4
    jitter: float = 0.0
    straight: bool = False

    def __call__(self, rng: np.random.Generator) -> ReferenceTrajectory:
        dims = len(self.model.position_dims)
        start = np.zeros(dims)
        start[:len(self.start_lo)] = rng.uniform(self.start_lo, self.start_hi)
        ang = self.heading + rng.uniform(-self.heading_spread, self.heading_spread)
        direction = np.zeros(dims)
        direction[0], direction[1] = np.cos(ang), np.sin(ang)
        normal = np.zeros(dims)
        normal[0], normal[1] = -direction[1], direction[0]
        length = rng.uniform(*self.length)
        s = np.linspace(0.0, 1.0, self.waypoints)
        lat = np.zeros(self.waypoints) if self.straight else rng.normal(0.0, self.lateral, self.waypoints)
        lat[0] = 0.0
        pts = start + length * s[:, None] * direction + lat[:, None] * normal
        pos = smooth_path(pts, self.K)
        if self.jitter > 0:
            pos = pos + rng.normal(0.0, self.jitter, pos.shape)
        return ReferenceTrajectory(lift_positions(self.model, pos), self.model.dt, "random")


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    hidden: tuple = (8, 8)
    N: int = 10
    lambda_track: float = 1.0
    lambda_state: float = 0.1
    lambda_ctrl: float = 0.1
    epochs: int = 40
    steps_per_epoch: int = 50
    batch_size: int = 64
    lr: float = 3e-3
    lr_final: float = 3e-4
    x_L: tuple = ()
    x_U: tuple = ()
    u_L: tuple = ()
    u_U: tuple = ()
    init_noise: tuple = ()  # half-widths of the start-state perturbation
    w_bar: tuple = ()  # half-widths of the training disturbance
    slope: float = 0.01
    seed: int = 0
    train_refs: int = 200
    val_refs: int = 50
    threshold: float = 0.1
    weight_decay: float = 0.0  # L2 penalty on weight matrices
    hidden_bias: float = 0.0  # initial hidden-layer bias
    w_persistent: float = 0.0  # fraction of windows whose disturbance is held constant
    horizon: int = 0  # rollout steps per training window, ramped up from N; 0 means N
    grad_clip: float = 0.0  # global gradient-norm cap; 0 disables
    max_hidden: int = 100
    K: int = 100

    def __post_init__(self):
        for name in ("lambda_track", "lambda_state", "lambda_ctrl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for lo, hi, name in ((self.x_L, self.x_U, "state"), (self.u_L, self.u_U, "control")):
            if len(lo) != len(hi) or not np.all(np.asarray(lo) < np.asarray(hi)):
                raise ValueError(f"{name} bounds must satisfy lower < upper element-wise")
        if sum(self.hidden) > self.max_hidden:
            raise ValueError(f"{sum(self.hidden)} hidden neurons exceed the budget of {self.max_hidden}")

    def bounds(self) -> dict:
        return {"x_L": self.x_L, "x_U": self.x_U, "u_L": self.u_L, "u_U": self.u_U}

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class TrainResult:
    policy: TrackingPolicy
    log: list
    train_error: float
    val_error: float
    threshold_met: bool

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "L_track", "L_state", "L_ctrl", "total"])
        for row in self.log:
            w.writerow([row["epoch"]] + [repr(row[k]) for k in ("L_track", "L_state", "L_ctrl", "total")])
        return buf.getvalue()


def tracking_error(model, policy, refs, K: int | None = None) -> float:
    """Mean over references and steps of ||x_k - p_k||, starting at p_1, w = 0."""
    errs = []
    K = K or len(refs[0])
    tau = np.stack([pad_reference(r, K, policy.N) for r in refs])
    x0 = tau[:, 0, :]
    # a blown-up loop yields inf/nan here; callers check finiteness
    with np.errstate(over="ignore", invalid="ignore"):
        xs = rollout(model, policy, x0, tau, None, K=K, guard=False)
        errs = np.linalg.norm(xs - tau[:, :K, :], axis=-1)
    return float(np.mean(errs))


def _loss_and_grads(model, cfg, params, x0, window, w):
    g = Graph()
    leaves = [g.input(a) for a in params.flat()]
    traced = TrackingPolicy(params.with_flat(leaves), cfg.N, model.state_dim, model.control_dim)
    H = w.shape[-2]
    xs, us = rollout(model, traced, x0, window, list(np.moveaxis(w, -2, 0)), K=H,
                     guard=False, return_controls=True)
    targets = window[:, :H, :]
    lt, ls, lc = losses(xs, us, targets, cfg.bounds())
    total = lt * cfg.lambda_track + ls * cfg.lambda_state + lc * cfg.lambda_ctrl
    grads = g.backward(total)
    flat = [grads.get(leaf.id, np.zeros_like(leaf.value)) for leaf in leaves]
    return (float(lt.value), float(ls.value), float(lc.value), float(total.value)), flat


def train_tracking_controller(model: DynamicsModel, cfg: TrainConfig, ref_sampler) -> TrainResult:
    """Fit the tracking MLP on N-step closed-loop rollouts of sampled references."""
    n, m, N = model.state_dim, model.control_dim, cfg.N
    rng = np.random.default_rng(cfg.seed)
    train_refs = [ref_sampler(rng) for _ in range(cfg.train_refs)]
    val_refs = [ref_sampler(rng) for _ in range(cfg.val_refs)]
    K = cfg.K
    H = cfg.horizon or N
    pool = np.stack([pad_reference(r, K, N) for r in train_refs])  # (R, K+N, n)
    # extra padding so every start index has a full lookahead for H steps
    pool = np.concatenate([pool, np.repeat(pool[:, -1:, :], H, axis=1)], axis=1)

    u_mid = 0.5 * (np.asarray(cfg.u_L) + np.asarray(cfg.u_U))
    params = init_mlp([n * N, *cfg.hidden, m], rng, cfg.slope, hidden_bias=cfg.hidden_bias)
    # start from the mid-range control at zero tracking error
    W_out, b_out = params.layers[-1]
    params.layers[-1] = (W_out, b_out + u_mid - mlp_forward(params, np.zeros(n * N)))
    init_noise = np.asarray(cfg.init_noise if cfg.init_noise else np.zeros(n), dtype=np.float64)
    w_bar = np.asarray(cfg.w_bar if cfg.w_bar else np.zeros(n), dtype=np.float64)

    state = OptimizerState()
    total_steps = cfg.epochs * cfg.steps_per_epoch
    history = []
    B = cfg.batch_size
    for epoch in range(cfg.epochs):
        acc = np.zeros(4)
        for it in range(cfg.steps_per_epoch):
            step = epoch * cfg.steps_per_epoch + it
            lr = cfg.lr * (cfg.lr_final / cfg.lr) ** (step / max(1, total_steps - 1))
            # the window grows linearly from N to H over training
            h = N + int(round((H - N) * step / max(1, total_steps - 1)))
            ridx = rng.integers(0, len(pool), B)
            kidx = rng.integers(0, K, B)
            window = np.stack([pool[r, k:k + h + N] for r, k in zip(ridx, kidx)])
            prev = np.stack([pool[r, max(k - 1, 0)] for r, k in zip(ridx, kidx)])
            x0 = prev + rng.uniform(-1.0, 1.0, (B, n)) * init_noise
            w = rng.uniform(-1.0, 1.0, (B, h, n)) * w_bar
            if cfg.w_persistent > 0:
                hold = rng.random(B) < cfg.w_persistent
                w[hold] = np.sign(w[hold, :1, :]) * w_bar
            vals, grads = _loss_and_grads(model, cfg, params, x0, window, w)
            if cfg.weight_decay:
                grads = [g + cfg.weight_decay * p if p.ndim == 2 else g for g, p in zip(grads, params.flat())]
            if cfg.grad_clip > 0:
                norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
                if norm > cfg.grad_clip:
                    grads = [g * (cfg.grad_clip / norm) for g in grads]
            if not np.isfinite(vals[3]):
                raise TrainingDiverged(f"epoch {epoch} step {it}: loss is {vals[3]} (components {vals[:3]})")
            try:
                flat, state = optimizer_step(state, params.flat(), grads, OptimizerConfig(lr=lr))
            except NonFiniteGradient as exc:
                raise TrainingDiverged(f"epoch {epoch} step {it}: {exc}; losses {vals}") from exc
            params = params.with_flat(flat)
            acc += vals
        acc /= cfg.steps_per_epoch
        history.append({"epoch": epoch, "L_track": float(acc[0]), "L_state": float(acc[1]),
                        "L_ctrl": float(acc[2]), "total": float(acc[3])})
        log.info("epoch %d  track %.5f  state %.5f  ctrl %.5f", epoch, *acc[:3])

    meta = {"tool_version": __version__, "config_hash": config_hash(cfg.to_dict())}
    policy = TrackingPolicy(params, N, n, m, meta)
    train_err = tracking_error(model, policy, train_refs[: cfg.val_refs], K)
    val_err = tracking_error(model, policy, val_refs, K)
    if not np.isfinite(val_err):
        raise TrainingDiverged(f"validation rollouts blew up (tracking error {val_err})")
    ok = bool(val_err < cfg.threshold)
    if not ok:
        warnings.warn(f"validation tracking error {val_err:.4f} above threshold {cfg.threshold}")
    return TrainResult(policy, history, train_err, val_err, ok)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]
