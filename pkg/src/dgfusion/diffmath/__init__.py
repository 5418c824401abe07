"""Minimal reverse-mode automatic differentiation in float64."""
from .ops import (
    ELEMENTWISE_KINDS,
    abs,
    add,
    bilinear_matrix,
    clamp,
    concat,
    conv2d,
    div,
    elementwise,
    exp,
    gelu,
    getitem,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    neg,
    pad2d,
    reduce,
    reflect_index,
    relu,
    reshape,
    resize_bilinear,
    sigmoid,
    softmax,
    space_to_depth,
    sqrt,
    sub,
    sum,
    take,
    take_flat,
    tanh,
    transpose,
    upsample2x,
)
from .tensor import (
    DTYPE,
    ContractViolation,
    DomainError,
    NonFiniteError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    no_grad,
    op_count,
    reset_op_count,
)
from .gradcheck import GradCheckResult, check_grads, numerical_grad, rel_error

__all__ = [name for name in dir() if not name.startswith("_")]
