"""Dense-tensor substrate: primitives, tape autodiff, Adam and gradient checks."""
from hwsi.numerics.container import load_tensor, read_tensor, save_tensor, write_tensor
from hwsi.numerics.gradcheck import GradCheckReport, grad_check
from hwsi.numerics.params import AdamState, Param, ParamSet, adam_step, backward
from hwsi.numerics.tensor import (
    ACTIVATIONS,
    PRIMITIVES,
    Tape,
    Tensor,
    add,
    concat,
    gelu,
    is_checked,
    l2_normalize,
    layer_norm,
    log_softmax,
    matmul,
    mean,
    mul,
    primitive_forward,
    relu,
    reshape,
    scale,
    set_checked,
    slice_,
    softmax,
    sum_of_squares,
    transpose,
    tsum,
    zero_rows,
)

__all__ = [
    "ACTIVATIONS", "PRIMITIVES", "AdamState", "GradCheckReport", "Param", "ParamSet", "Tape",
    "Tensor", "adam_step", "add", "backward", "concat", "gelu", "grad_check", "is_checked",
    "l2_normalize", "layer_norm", "load_tensor", "log_softmax", "matmul", "mean", "mul",
    "primitive_forward", "read_tensor", "relu", "reshape", "save_tensor", "scale", "set_checked",
    "slice_", "softmax", "sum_of_squares", "transpose", "tsum", "write_tensor", "zero_rows",
]
