"""Small numpy tensor engine with reverse-mode autodiff and SGD."""

from . import functional, nn, rng
from .autograd import (
    NonFiniteError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
)
from .gradcheck import GradCheckResult, check_gradients
from .optim import SGD, clip_grad_norm, sgd_step

__all__ = [
    "NonFiniteError", "ShapeError", "Tape", "Tensor", "backward", "default_dtype", "no_grad",
    "precision", "functional", "nn", "rng", "GradCheckResult", "check_gradients", "SGD", "sgd_step",
    "clip_grad_norm",
]
