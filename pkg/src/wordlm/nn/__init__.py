"""Differentiable tensor kernels: autodiff tape, GPT-block ops, grad checking."""

from .gradcheck import grad_check
from .ops import (
    AttentionMask,
    cross_entropy,
    embedding,
    gelu,
    layer_norm,
    linear,
    masked_attention,
    masked_softmax,
)
from .tensor import Tensor, cat, grad_enabled, no_grad, normal_init, zeros_param
from .tensorio import dump_tensor, load_tensor

__all__ = [
    "AttentionMask",
    "Tensor",
    "cat",
    "cross_entropy",
    "dump_tensor",
    "embedding",
    "gelu",
    "grad_check",
    "grad_enabled",
    "layer_norm",
    "linear",
    "load_tensor",
    "masked_attention",
    "masked_softmax",
    "no_grad",
    "normal_init",
    "zeros_param",
]
