from .numcore import (
    DEFAULT_DTYPE,
    LN_EPS,
    Graph,
    Tensor,
    activation,
    add,
    as_tensor,
    backward,
    check_finite,
    concat,
    cross_entropy,
    div,
    embedding,
    finite_diff_grad,
    grad_enabled,
    layer_norm,
    matmul,
    max_relative_error,
    mul,
    no_grad,
    parameter,
    reshape,
    softmax_rows,
    sub,
    take,
    tensor_mean,
    tensor_sum,
    transpose,
    zero_grads,
)

__all__ = [
    "DEFAULT_DTYPE",
    "LN_EPS",
    "Graph",
    "Tensor",
    "activation",
    "add",
    "as_tensor",
    "backward",
    "check_finite",
    "concat",
    "cross_entropy",
    "div",
    "embedding",
    "finite_diff_grad",
    "grad_enabled",
    "layer_norm",
    "matmul",
    "max_relative_error",
    "mul",
    "no_grad",
    "parameter",
    "reshape",
    "softmax_rows",
    "sub",
    "take",
    "tensor_mean",
    "tensor_sum",
    "transpose",
    "zero_grads",
]
