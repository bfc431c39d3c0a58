"""Dense-tensor substrate: numpy-backed tensors, reverse-mode autodiff, optimizers."""

from colflow.numerics.tensor import (
    ContractViolation,
    NumericFault,
    Tape,
    Tensor,
    active_tape,
    add,
    backward,
    clip,
    concat,
    conv2d,
    dropout,
    expand,
    exp,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
    mean,
    mul,
    neg,
    permute,
    reshape,
    rotary_apply,
    scale,
    slice_,
    softmax_lastdim,
    sub,
    sum_,
    sum_sq,
    upsample_nearest2d,
)
from colflow.numerics.optim import (
    AdamW,
    AdamWState,
    EmaState,
    EmaTracker,
    adamw_step,
    ema_update,
    grad_clip_by_norm,
    init_adamw_state,
)

__all__ = [
    "ContractViolation",
    "NumericFault",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "backward",
    "clip",
    "concat",
    "conv2d",
    "dropout",
    "expand",
    "exp",
    "gather_rows",
    "gelu",
    "layer_norm",
    "matmul",
    "mean",
    "mul",
    "neg",
    "permute",
    "reshape",
    "rotary_apply",
    "scale",
    "slice_",
    "softmax_lastdim",
    "sub",
    "sum_",
    "sum_sq",
    "upsample_nearest2d",
    "AdamW",
    "AdamWState",
    "EmaState",
    "EmaTracker",
    "adamw_step",
    "ema_update",
    "grad_clip_by_norm",
    "init_adamw_state",
]
