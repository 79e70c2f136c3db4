"""Multi-layer perceptron parameters, evaluation and serialization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from .graph import ShapeError


@dataclass(frozen=True)
class Activation:
    kind: str = "leaky_relu"
    slope: float = 0.01

    def __post_init__(self):
        if self.kind not in ("leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.kind!r}")

    def to_dict(self) -> dict:
        if self.kind == "identity":
            return {"kind": "identity"}
        return {"kind": self.kind, "slope": self.slope}


@dataclass
class MlpParams:
    """Dense layers ``(W, b)``; hidden layers use ``activation``, the last is linear.

    Layer entries may also be graph nodes while tracing gradients.
    """

    layers: list[tuple]
    activation: Activation = field(default_factory=Activation)

    def __post_init__(self):
        for i in range(1, len(self.layers)):
            w_prev, w = self.layers[i - 1][0], self.layers[i][0]
            if _shape(w)[1] != _shape(w_prev)[0]:
                raise ShapeError(
                    f"layer {i}: input width {_shape(w)[1]} does not match "
                    f"layer {i - 1} output width {_shape(w_prev)[0]}"
                )

    @property
    def in_dim(self) -> int:
        return _shape(self.layers[0][0])[1]

    @property
    def out_dim(self) -> int:
        return _shape(self.layers[-1][0])[0]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [_shape(w)[0] for w, _ in self.layers]

    @property
    def hidden_neurons(self) -> int:
        return sum(self.widths[1:-1])

    def flat(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_flat(self, arrays) -> "MlpParams":
        arrays = list(arrays)
        layers = [(arrays[2 * i], arrays[2 * i + 1]) for i in range(len(self.layers))]
        return MlpParams(layers, self.activation)

    def to_dict(self) -> dict:
        return {
            "layers": [{"w": np.asarray(w).tolist(), "b": np.asarray(b).tolist()} for w, b in self.layers],
            "activation": self.activation.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        act = d.get("activation", {"kind": "leaky_relu", "slope": 0.01})
        layers = []
        for i, layer in enumerate(d["layers"]):
            w = np.asarray(layer["w"], dtype=np.float64)
            b = np.asarray(layer["b"], dtype=np.float64)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} are inconsistent")
            layers.append((w, b))
        return cls(layers, Activation(act["kind"], float(act.get("slope", 0.01))))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "MlpParams":
        return cls.from_dict(json.loads(text))


def _shape(a) -> tuple:
    return tuple(G.value_of(a).shape)


def init_mlp(widths, rng: np.random.Generator, slope: float = 0.01, out_bias=None,
             hidden_bias: float = 0.0) -> MlpParams:
    """He-uniform initialisation for ``widths = [in, h1, ..., out]``."""
    layers = []
    last = len(widths) - 2
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        lim = np.sqrt(6.0 / fan_in) if i < last else np.sqrt(1.0 / fan_in)
        w = rng.uniform(-lim, lim, size=(fan_out, fan_in))
        b = np.full(fan_out, hidden_bias if i < last else 0.0)
        layers.append((w, b))
    if out_bias is not None:
        layers[-1] = (layers[-1][0], np.asarray(out_bias, dtype=np.float64).copy())
    return MlpParams(layers, Activation("leaky_relu", slope))


def mlp_forward(params: MlpParams, x):
    """Evaluate the network on ``x`` (array with features last, or a graph node)."""
    width = G.value_of(x).shape[-1] if G.value_of(x).ndim else 1
    if width != params.in_dim:
        raise ShapeError(f"layer 0: expects input width {params.in_dim}, got {width}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = G.affine(h, w, b)
        if i < last and params.activation.kind == "leaky_relu":
            h = G.leaky_relu(h, params.activation.slope)
    return h


def lipschitz_bound(params: MlpParams) -> float:
    """Product of induced inf-norms; leaky-ReLU with slope <= 1 is 1-Lipschitz."""
    out = 1.0
    for w, _ in params.layers:
        out *= float(np.abs(w).sum(axis=1).max())
    return out
