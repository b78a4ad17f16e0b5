"""Double-precision tensors with reverse-mode differentiation of any order."""

from . import glt, ops
from .fd import finite_difference_oracle, max_relative_error
from .ops import apply
from .tensor import (
    DomainError,
    Function,
    ShapeError,
    Tensor,
    TraceError,
    as_tensor,
    grad,
    no_trace,
    replay,
    trace_nodes,
    tracing,
)

__all__ = [
    "DomainError",
    "Function",
    "ShapeError",
    "Tensor",
    "TraceError",
    "apply",
    "as_tensor",
    "finite_difference_oracle",
    "glt",
    "grad",
    "max_relative_error",
    "no_trace",
    "ops",
    "replay",
    "trace_nodes",
    "tracing",
]
