from . import ops
from .gradcheck import NonDeterministicError, finite_diff_grad_check
from .nn import LayerNorm, Linear, Mlp, Module, ModuleList, Parameter
from .ops import (
    bce_loss,
    concat,
    dropout,
    kl_divergence,
    layer_norm,
    linear,
    matmul,
    softmax,
    split,
    strided_mean_pool3d,
)
from .optim import AdamW, adamw_step
from .rng import RngStreams
from .tensor import DimensionError, NumericError, Tensor, no_grad

__all__ = [
    "AdamW", "DimensionError", "LayerNorm", "Linear", "Mlp", "Module", "ModuleList",
    "NonDeterministicError", "NumericError", "Parameter", "RngStreams", "Tensor",
    "adamw_step", "bce_loss", "concat", "dropout", "finite_diff_grad_check", "kl_divergence",
    "layer_norm", "linear", "matmul", "no_grad", "ops", "softmax", "split", "strided_mean_pool3d",
]
