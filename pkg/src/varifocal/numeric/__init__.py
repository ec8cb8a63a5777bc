from .tensor import (
    GraphError,
    NonFiniteError,
    NumericError,
    Parameter,
    Tensor,
    as_tensor,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)
from .ops import ShapeError
from .optim import Adam, AdamState, adam_step, step_decay_lr

__all__ = [
    "Adam",
    "AdamState",
    "GraphError",
    "NonFiniteError",
    "NumericError",
    "Parameter",
    "ShapeError",
    "Tensor",
    "adam_step",
    "as_tensor",
    "default_dtype",
    "no_grad",
    "precision",
    "set_default_dtype",
    "step_decay_lr",
]
