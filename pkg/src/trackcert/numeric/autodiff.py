from __future__ import annotations

import numpy as np

from .graph import Graph, Node, TapeError
from .mlp import MlpParams


def grad(scalar_fn, params, return_value: bool = False):
    """Gradient of ``scalar_fn(params)`` with respect to every parameter array.

    ``params`` is an :class:`MlpParams`, a single array, or a list of arrays;
    the gradient comes back in the same structure.  ``scalar_fn`` receives
    the parameters as recorded nodes and must return a scalar node.
    """
    g = Graph()
    if isinstance(params, MlpParams):
        leaves = [g.input(a) for a in params.flat()]
        traced = params.with_flat(leaves)
    elif isinstance(params, (list, tuple)):
        leaves = [g.input(a) for a in params]
        traced = list(leaves)
    else:
        leaves = [g.input(params)]
        traced = leaves[0]

    out = scalar_fn(traced)
    if not isinstance(out, Node):
        raise TapeError("scalar_fn did not produce a recorded value; is it using the parameters?")
    if out.value.size != 1:
        raise TapeError(f"scalar_fn must return a scalar, got shape {out.value.shape}")
    grads = g.backward(out)
    flat = [grads.get(leaf.id, np.zeros_like(leaf.value)) for leaf in leaves]

    if isinstance(params, MlpParams):
        result = params.with_flat(flat)
    elif isinstance(params, (list, tuple)):
        result = flat
    else:
        result = flat[0]
    if return_value:
        return float(out.value), result
    return result
