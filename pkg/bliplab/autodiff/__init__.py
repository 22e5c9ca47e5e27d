from bliplab.autodiff.rng import RngStream
from bliplab.autodiff.tensor import (
    GradientMap,
    Tape,
    Tensor,
    activation,
    add,
    as_tensor,
    backward,
    concat,
    div,
    elementwise,
    exp,
    gather,
    gaussian_sample,
    log,
    matmul,
    mean,
    mul,
    neg,
    reduce,
    reshape,
    scatter_add,
    sigmoid,
    sqrt,
    square,
    sub,
    swish,
    transpose,
    tsum,
)

__all__ = [
    "GradientMap",
    "RngStream",
    "Tape",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "div",
    "elementwise",
    "exp",
    "gather",
    "gaussian_sample",
    "log",
    "matmul",
    "mean",
    "mul",
    "neg",
    "reduce",
    "reshape",
    "scatter_add",
    "sigmoid",
    "sqrt",
    "square",
    "sub",
    "swish",
    "transpose",
    "tsum",
]
