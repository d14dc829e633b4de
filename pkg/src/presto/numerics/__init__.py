"""Tensor arithmetic, reverse-mode autodiff, Adam and seeded randomness."""

from . import tensor as ops
from .gradcheck import check_gradients, relative_error
from .optim import Adam, AdamState, adam_update
from .rng import SeededStream, gaussian_draw
from .tensor import NonFiniteError, ShapeError, Tensor, no_grad, stop_gradient

__all__ = [
    "ops", "Tensor", "ShapeError", "NonFiniteError", "no_grad", "stop_gradient",
    "Adam", "AdamState", "adam_update", "SeededStream", "gaussian_draw",
    "check_gradients", "relative_error",
]
