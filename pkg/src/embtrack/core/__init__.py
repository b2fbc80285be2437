from .checkpoint import load_arrays, save_arrays
from .ops import (
    add, concat_channels, conv2d, max_pool2d, mean, mul, pointwise, relu, sigmoid,
    slice_channels, square, sub, sum, tanh, upsample2x,
)
from .optim import Adam, AdamState, he_init, zeros
from .tensor import Tape, Tensor, backward, get_default_dtype, precision, set_default_dtype

__all__ = [
    "Adam", "AdamState", "Tape", "Tensor", "add", "backward", "concat_channels", "conv2d",
    "get_default_dtype", "he_init", "load_arrays", "max_pool2d", "mean", "mul", "pointwise",
    "precision", "relu", "save_arrays", "set_default_dtype", "sigmoid", "slice_channels",
    "square", "sub", "sum", "tanh", "upsample2x", "zeros",
]
