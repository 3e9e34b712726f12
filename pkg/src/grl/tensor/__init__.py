"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .core import (
    DTYPES,
    DimensionError,
    NumericError,
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    backward,
    no_grad,
)
from .ops import (  # noqa: A004
    abs,
    activation,
    add,
    concat,
    conv2d,
    div,
    gelu,
    getitem,
    l1_loss,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
    pool2d,
    relu,
    reshape,
    sigmoid,
    softmax_rows,
    sub,
    sum,
    take,
    transpose,
)
from .io import read_tensor, write_tensor

__all__ = [
    "abs",
    "DTYPES",
    "DimensionError",
    "NumericError",
    "Parameter",
    "Tape",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "conv2d",
    "div",
    "gelu",
    "getitem",
    "l1_loss",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "no_grad",
    "pixel_shuffle",
    "pixel_unshuffle",
    "pool2d",
    "read_tensor",
    "relu",
    "reshape",
    "sigmoid",
    "softmax_rows",
    "sub",
    "sum",
    "take",
    "transpose",
    "write_tensor",
]
