"""Minimal float64 tensor math, autodiff and optimisation."""

from .optim import AdamConfig, AdamState, LrSchedule, adam_step, global_grad_norm, zero_grad
from .rng import derive_seed, make_rng, stage_rng
from .tensor import (
    NEG_INF,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    div,
    dropout,
    embedding,
    exp,
    is_grad_enabled,
    label_smoothed_cross_entropy,
    layer_norm,
    linear,
    log,
    log_softmax,
    log_softmax_array,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    relu,
    reshape,
    scale,
    softmax,
    sub,
    transpose,
    tsum,
)

__all__ = [
    "NEG_INF",
    "AdamConfig",
    "AdamState",
    "LrSchedule",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "derive_seed",
    "div",
    "dropout",
    "embedding",
    "exp",
    "global_grad_norm",
    "is_grad_enabled",
    "label_smoothed_cross_entropy",
    "layer_norm",
    "linear",
    "log",
    "log_softmax",
    "log_softmax_array",
    "make_rng",
    "matmul",
    "mean",
    "mul",
    "neg",
    "no_grad",
    "relu",
    "reshape",
    "scale",
    "softmax",
    "stage_rng",
    "sub",
    "transpose",
    "tsum",
    "zero_grad",
]
