from __future__ import annotations

from typing import Iterable

import numpy as np

from .nn import Parameter


class SGD:
    """Plain stochastic gradient descent, no momentum: ``p <- p - lr * g``."""

    def __init__(self, params: Iterable[Parameter], lr: float):
        if lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {lr}")
        self.params = list(params)
        self.lr = lr

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None:
                p.data -= (self.lr * p.grad).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def clip_grad_norm(params: Iterable[Parameter], max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    params = [p for p in params if p.grad is not None]
    norm = float(np.sqrt(sum(float(np.dot(p.grad.ravel().astype(np.float64), p.grad.ravel())) for p in params)))
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            p.grad = (p.grad * scale).astype(p.grad.dtype)
    return norm


def sgd_step(params, grads, lr: float) -> list:
    """Functional form of one SGD update on raw arrays."""
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    return [p - lr * g for p, g in zip(params, grads)]
