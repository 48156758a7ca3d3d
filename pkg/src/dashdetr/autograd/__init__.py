from .tensor import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    concat,
    elementwise,
    layer_norm,
    log_softmax,
    matmul,
    no_grad,
    softmax,
    stack,
)
from .optim import Adam, AdamState, adam_step, clip_grad_norm

__all__ = [
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "Tensor",
    "backward",
    "concat",
    "elementwise",
    "layer_norm",
    "log_softmax",
    "matmul",
    "no_grad",
    "softmax",
    "stack",
    "Adam",
    "AdamState",
    "adam_step",
    "clip_grad_norm",
]
