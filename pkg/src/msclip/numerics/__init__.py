from .engine import (
    MASK_VALUE,
    BatchNormState,
    Tape,
    Tensor,
    add,
    avg_pool2d,
    backward,
    batch_norm,
    concat,
    conv2d,
    conv_output_size,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    im2col,
    l2_normalize,
    layer_norm,
    log,
    matmul,
    mul,
    neg,
    ones,
    pad2d,
    pow_scalar,
    reshape,
    softmax_rows,
    sqrt,
    sub,
    swapaxes,
    take_rows,
    tanh,
    tensor_mean,
    tensor_sum,
    transpose,
    zeros,
)
from .gradcheck import finite_diff_grad, max_relative_error

__all__ = [
    "MASK_VALUE",
    "BatchNormState",
    "Tape",
    "Tensor",
    "add",
    "avg_pool2d",
    "backward",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_output_size",
    "div",
    "embedding",
    "exp",
    "finite_diff_grad",
    "gelu",
    "getitem",
    "im2col",
    "l2_normalize",
    "layer_norm",
    "log",
    "matmul",
    "max_relative_error",
    "mul",
    "neg",
    "ones",
    "pad2d",
    "pow_scalar",
    "reshape",
    "softmax_rows",
    "sqrt",
    "sub",
    "swapaxes",
    "take_rows",
    "tanh",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "zeros",
]
