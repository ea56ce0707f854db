from .tensor import DomainError, GraphError, NonFiniteError, ShapeError, Tensor, as_tensor
from . import ops
from .conv import conv2d, same_padding
from .gradcheck import grad_check, grad_check_params, relative_error

__all__ = [
    "Tensor",
    "as_tensor",
    "ops",
    "conv2d",
    "same_padding",
    "grad_check",
    "grad_check_params",
    "relative_error",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "GraphError",
]
