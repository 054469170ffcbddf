"""Small numpy autodiff engine with the layers the recognition networks need."""
from . import ops
from .checkpoint import load_checkpoint, parse_checkpoint, save_checkpoint
from .engine import Tensor, default_dtype, grad_enabled, no_grad, precision, set_default_dtype
from .inflate import inflate_2d_to_3d
from .optim import SGD, sgd_step

__all__ = [
    "ops", "Tensor", "default_dtype", "grad_enabled", "no_grad", "precision",
    "set_default_dtype", "inflate_2d_to_3d", "SGD", "sgd_step",
    "save_checkpoint", "load_checkpoint", "parse_checkpoint",
]
