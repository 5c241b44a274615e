"""Minimal numpy tensor library with reverse-mode differentiation."""

from . import functional
from .conv import conv, conv_transpose, max_pool_mask, upsample_nearest
from .gradcheck import grad_check, param_grad_check
from .nn import (
    MLP,
    Adam,
    Conv,
    ConvTranspose,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    buffer,
    clip_grad_norm,
    global_grad_norm,
    parameter,
)
from .sampling import interp
from .tensor import (
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    grad_enabled,
    no_grad,
    precision,
    set_default_dtype,
)

__all__ = [
    "Adam", "Conv", "ConvTranspose", "GroupNorm", "LayerNorm", "Linear", "MLP", "Module",
    "MultiHeadAttention", "Tensor", "as_tensor", "backward", "buffer", "clip_grad_norm", "conv",
    "conv_transpose", "functional", "get_default_dtype", "global_grad_norm", "grad_check",
    "grad_enabled", "interp", "max_pool_mask", "no_grad", "param_grad_check", "parameter",
    "precision", "set_default_dtype", "upsample_nearest",
]
