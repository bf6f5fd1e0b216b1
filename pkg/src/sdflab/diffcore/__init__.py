"""Minimal reverse-mode differentiable core: arrays, tape, layers, Adam."""

from .autodiff import (
    BatchNormState,
    DualBatchNormState,
    ParamSet,
    Tape,
    Tensor,
    abs_,
    activation,
    add,
    add_scalar,
    affine,
    backward,
    batchnorm,
    clamp,
    concat_cols,
    dual_batchnorm,
    expand_rows,
    fuse_max,
    log,
    maxpool_set,
    mean,
    mul,
    neg,
    no_tape,
    norm2,
    relu,
    reshape,
    scale,
    sigmoid,
    square,
    sub,
    tanh,
    total,
)
from .gradcheck import gradcheck
from .optim import AdamState, adam_step
from .serial import load_params, read_manifest, save_params, write_manifest

__all__ = [
    "BatchNormState",
    "DualBatchNormState",
    "ParamSet",
    "Tape",
    "Tensor",
    "abs_",
    "activation",
    "adam_step",
    "AdamState",
    "add",
    "add_scalar",
    "affine",
    "backward",
    "batchnorm",
    "clamp",
    "concat_cols",
    "dual_batchnorm",
    "expand_rows",
    "fuse_max",
    "gradcheck",
    "load_params",
    "log",
    "maxpool_set",
    "mean",
    "mul",
    "neg",
    "no_tape",
    "norm2",
    "read_manifest",
    "relu",
    "reshape",
    "save_params",
    "scale",
    "sigmoid",
    "square",
    "sub",
    "tanh",
    "total",
    "write_manifest",
]
