"""Minimal reverse-mode differentiation engine and Adam optimizer."""

from .adam import Adam, AdamState, adam_step
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .conv import conv2d, upsample2x
from .tensor import (
    ShapeError,
    Tensor,
    absolute,
    add,
    as_tensor,
    backward,
    concat,
    cos,
    cross_entropy_with_logits,
    div,
    embedding_lookup,
    exp,
    gradients,
    layer_norm,
    leaky_relu,
    log,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    sigmoid,
    sin,
    softmax,
    sqrt,
    stop_gradient,
    straight_through,
    sub,
    take_rows,
    tanh,
    tensor_mean,
    tensor_slice,
    tensor_sum,
    tensor_var,
    transpose,
)
from . import nn

__all__ = [
    "Adam",
    "AdamState",
    "adam_step",
    "CheckpointError",
    "load_checkpoint",
    "save_checkpoint",
    "conv2d",
    "upsample2x",
    "nn",
    "ShapeError",
    "Tensor",
    "absolute",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cos",
    "cross_entropy_with_logits",
    "div",
    "embedding_lookup",
    "exp",
    "gradients",
    "layer_norm",
    "leaky_relu",
    "log",
    "log_softmax",
    "matmul",
    "mul",
    "relu",
    "reshape",
    "sigmoid",
    "sin",
    "softmax",
    "sqrt",
    "stop_gradient",
    "straight_through",
    "sub",
    "take_rows",
    "tanh",
    "tensor_mean",
    "tensor_slice",
    "tensor_sum",
    "tensor_var",
    "transpose",
]
