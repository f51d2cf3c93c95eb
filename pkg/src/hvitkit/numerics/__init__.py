from . import checkpoint
from .grad import backward, grad_check, numeric_gradients, relative_error
from .tensor import (
    OPS,
    Graph,
    ShapeError,
    Tensor,
    add,
    add_bias,
    as_tensor,
    concat,
    expand,
    gelu,
    layer_norm,
    matmul,
    mean_all,
    mse_loss,
    mul,
    reshape,
    scale,
    softmax_rows,
    sub,
    sum_all,
    take,
    transpose,
)

__all__ = [
    "OPS",
    "Graph",
    "ShapeError",
    "Tensor",
    "add",
    "add_bias",
    "as_tensor",
    "backward",
    "checkpoint",
    "concat",
    "expand",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mean_all",
    "mse_loss",
    "mul",
    "numeric_gradients",
    "relative_error",
    "reshape",
    "scale",
    "softmax_rows",
    "sub",
    "sum_all",
    "take",
    "transpose",
]
