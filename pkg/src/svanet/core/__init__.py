"""Minimal numpy autodiff: tensors, dense ops, layers, seeded streams."""

from . import functional
from .gradcheck import gradcheck, relative_error
from .nn import (
    Conv2d,
    ConvNormAct,
    ConvTranspose2d,
    GroupNorm,
    LayerNorm,
    Linear,
    Module,
    Parameter,
)
from .rng import Rng
from .tensor import (
    ConfigurationError,
    MacCounter,
    Tensor,
    count_macs,
    grad_enabled,
    is_meta,
    meta_mode,
    no_grad,
)

__all__ = [
    "ConfigurationError",
    "Conv2d",
    "ConvNormAct",
    "ConvTranspose2d",
    "GroupNorm",
    "LayerNorm",
    "Linear",
    "MacCounter",
    "Module",
    "Parameter",
    "Rng",
    "Tensor",
    "count_macs",
    "functional",
    "grad_enabled",
    "gradcheck",
    "is_meta",
    "meta_mode",
    "no_grad",
    "relative_error",
]
