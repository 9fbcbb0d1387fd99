"""Minimal numpy tensor library with reverse-mode autodiff."""
from . import ops
from .gradcheck import GradcheckResult, gradcheck
from .nn import Conv2d, LayerNorm, Linear, Mlp, Module, Parameter, make_rng
from .optim import AdamW, ReduceLROnPlateau
from .tensor import (
    ContractError,
    OpCounter,
    ShapeError,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_default_dtype,
    no_grad,
    set_default_dtype,
)

__all__ = [
    "AdamW",
    "ContractError",
    "Conv2d",
    "GradcheckResult",
    "LayerNorm",
    "Linear",
    "Mlp",
    "Module",
    "OpCounter",
    "Parameter",
    "ReduceLROnPlateau",
    "ShapeError",
    "Tape",
    "Tensor",
    "as_tensor",
    "backward",
    "get_default_dtype",
    "gradcheck",
    "make_rng",
    "no_grad",
    "ops",
    "set_default_dtype",
]
