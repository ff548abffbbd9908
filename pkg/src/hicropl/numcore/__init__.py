"""Tensors, reverse-mode differentiation and neural primitives."""
from .functional import cosine_similarity, dot, gelu, l2_normalize, layer_norm, linear, log_softmax, softmax
from .gradcheck import grad_check, relative_error
from .optim import Adam
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    concat,
    is_grad_enabled,
    matmul,
    no_grad,
    parameter,
    stack,
    topological_order,
    zero_grad,
)

__all__ = [
    "Adam", "Tensor", "as_tensor", "backward", "concat", "cosine_similarity", "dot", "gelu",
    "grad_check", "is_grad_enabled", "l2_normalize", "layer_norm", "linear", "log_softmax",
    "matmul", "no_grad", "parameter", "relative_error", "softmax", "stack", "topological_order",
    "zero_grad",
]
