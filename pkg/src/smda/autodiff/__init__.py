from . import ops  # noqa: F401  (registers primitive ops)
from .functional import conv2d, l2_normalize, linear, log_softmax, maxpool2x2, relu, softmax_cross_entropy
from .gradcheck import finite_diff, rel_err
from .tensor import (
    DTYPE,
    Graph,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    active_graph,
    as_tensor,
    backward,
    grad_of,
    is_grad_enabled,
    no_grad,
    op_kinds,
    record_op,
)

__all__ = [
    "DTYPE",
    "Graph",
    "GraphError",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "active_graph",
    "as_tensor",
    "backward",
    "conv2d",
    "finite_diff",
    "grad_of",
    "is_grad_enabled",
    "l2_normalize",
    "linear",
    "log_softmax",
    "maxpool2x2",
    "no_grad",
    "op_kinds",
    "record_op",
    "rel_err",
    "relu",
    "softmax_cross_entropy",
]
