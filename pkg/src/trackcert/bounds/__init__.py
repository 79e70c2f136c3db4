from .box import HyperRect, concat_boxes, hull
from .crown import (
    AffineEnclosure,
    BoundResult,
    UnverifiableError,
    bound_graph,
    concretize,
    crown_backward,
    ibp_forward,
)
from .relax import (
    BilinearRelaxation,
    ScalarRelaxation,
    SingularityError,
    exact_range,
    mccormick_relax,
    relax_scalar,
)

__all__ = [
    "AffineEnclosure", "BilinearRelaxation", "BoundResult", "HyperRect", "ScalarRelaxation",
    "SingularityError", "UnverifiableError", "bound_graph", "concat_boxes", "concretize",
    "crown_backward", "exact_range", "hull", "ibp_forward", "mccormick_relax", "relax_scalar",
]
