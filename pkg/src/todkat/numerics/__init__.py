"""Self-contained numerics: tensors, autodiff tape, Adam, RNG, checkpoints."""

from .backend import backend_name, get_kernels
from .checkpoint import load_params, save_params
from .optim import AdamState, adam_step
from .rng import RngStream
from .tensor import (
    Tape,
    Tensor,
    add,
    add_rowvec,
    add_scalar,
    clamp,
    concat,
    constant,
    cross_entropy_rows,
    exp,
    gather_rows,
    layer_norm_rows,
    log,
    masked_fill,
    matmul,
    mul,
    mul_rowvec,
    mul_scalar,
    neg,
    reshape,
    scale,
    set_debug_checks,
    sigmoid,
    softmax,
    sub,
    take_cols,
    take_rows,
    tanh,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "AdamState",
    "RngStream",
    "Tape",
    "Tensor",
    "adam_step",
    "add",
    "add_rowvec",
    "add_scalar",
    "backend_name",
    "clamp",
    "concat",
    "constant",
    "cross_entropy_rows",
    "exp",
    "gather_rows",
    "get_kernels",
    "layer_norm_rows",
    "load_params",
    "log",
    "masked_fill",
    "matmul",
    "mul",
    "mul_rowvec",
    "mul_scalar",
    "neg",
    "reshape",
    "save_params",
    "scale",
    "set_debug_checks",
    "sigmoid",
    "softmax",
    "sub",
    "take_cols",
    "take_rows",
    "tanh",
    "tmean",
    "transpose",
    "tsum",
]
