"""Small numpy autodiff stack: tape, dense/MADE networks, optimizers."""

from .autodiff import GradientError, Var, as_var, concat, diagnostics, grad, sqrt_safe, value_of
from .checkpoint import load_tensors, save_tensors
from .nets import DenseNetwork, MadeNetwork, made_degrees, made_masks
from .optim import AdamW, OptimizerError, RMSprop

__all__ = [
    "GradientError", "Var", "as_var", "concat", "diagnostics", "grad", "sqrt_safe", "value_of",
    "load_tensors", "save_tensors", "DenseNetwork", "MadeNetwork", "made_degrees", "made_masks",
    "AdamW", "OptimizerError", "RMSprop",
]
