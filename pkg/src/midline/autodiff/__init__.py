"""Minimal reverse-mode differentiation over numpy arrays."""
from . import ops
from .gradcheck import GradcheckError, gradcheck
from .ops import ShapeError
from .tensor import (
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    make_node,
    set_default_dtype,
)

__all__ = [
    "GradcheckError",
    "ShapeError",
    "Tensor",
    "as_tensor",
    "default_dtype",
    "get_default_dtype",
    "gradcheck",
    "make_node",
    "ops",
    "set_default_dtype",
]
