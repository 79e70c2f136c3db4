"""Dense numerics: recorded graphs with reverse-mode AD, MLPs, optimizers."""

from .graph import Graph, Node, ShapeError, Tape, TapeError
from .mlp import Activation, MlpParams, init_mlp, lipschitz_bound, mlp_forward
from .optim import NonFiniteGradient, OptimizerConfig, OptimizerState, optimizer_step
from .autodiff import grad

__all__ = [
    "Graph", "Node", "Tape", "TapeError", "ShapeError",
    "Activation", "MlpParams", "init_mlp", "mlp_forward", "lipschitz_bound",
    "OptimizerConfig", "OptimizerState", "optimizer_step", "NonFiniteGradient",
    "grad",
]
