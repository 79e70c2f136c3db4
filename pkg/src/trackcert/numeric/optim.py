from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 1e-3
    mode: str = "adam"  # or "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class OptimizerState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    count: list = field(default_factory=list)


def optimizer_step(state: OptimizerState, params: list, grads: list, hp: OptimizerConfig):
    """One update over a flat list of arrays; returns ``(new_params, new_state)``.

    Entries whose gradient is exactly zero are left untouched, moments
    included, so a zero gradient is always a fixed point.
    """
    if hp.lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameter arrays but {len(grads)} gradients")
    for i, (p, g) in enumerate(zip(params, grads)):
        if np.shape(p) != np.shape(g):
            raise ValueError(f"array {i}: parameter shape {np.shape(p)} != gradient shape {np.shape(g)}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient in array {i}")

    if hp.mode == "sgd":
        return [p - hp.lr * g for p, g in zip(params, grads)], OptimizerState(state.step + 1)
    if hp.mode != "adam":
        raise ValueError(f"unknown optimizer mode {hp.mode!r}")

    if not state.m:
        state = OptimizerState(
            0,
            [np.zeros_like(p) for p in params],
            [np.zeros_like(p) for p in params],
            [np.zeros(np.shape(p), dtype=np.int64) for p in params],
        )
    new_p, new_m, new_v, new_c = [], [], [], []
    for p, g, m, v, c in zip(params, grads, state.m, state.v, state.count):
        active = g != 0.0
        c = c + active
        m = np.where(active, hp.beta1 * m + (1 - hp.beta1) * g, m)
        v = np.where(active, hp.beta2 * v + (1 - hp.beta2) * g * g, v)
        t = np.maximum(c, 1)
        mhat = m / (1 - hp.beta1**t)
        vhat = v / (1 - hp.beta2**t)
        upd = np.where(active, hp.lr * mhat / (np.sqrt(vhat) + hp.eps), 0.0)
        new_p.append(p - upd)
        new_m.append(m)
        new_v.append(v)
        new_c.append(c)
    return new_p, OptimizerState(state.step + 1, new_m, new_v, new_c)
