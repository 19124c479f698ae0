"""Minimal deterministic reverse-mode differentiation on float64 numpy arrays."""

from . import ops
from .gradcheck import check_gradients, numerical_grad, relative_error
from .ops import NEG_SENTINEL
from .tensor import (
    DTYPE,
    ComputeGraph,
    GraphError,
    ShapeError,
    Tensor,
    as_tensor,
    count_flops,
    no_grad,
    trace_graph,
)

__all__ = [
    "DTYPE",
    "NEG_SENTINEL",
    "ComputeGraph",
    "GraphError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "check_gradients",
    "count_flops",
    "no_grad",
    "numerical_grad",
    "ops",
    "relative_error",
    "trace_graph",
]
