"""Reconstruction and contrastive objectives and their weighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, functional as F


@dataclass(frozen=True)
class LossWeights:
    reconstruction: float = 5.0
    contrastive: float = 10.0
    temperature: float = 0.1

    def __post_init__(self):
        if self.reconstruction < 0 or self.contrastive < 0 or self.temperature <= 0:
            raise ValueError(f"invalid loss weights {self}")


def gkl_loss(x, x_hat: Tensor) -> Tensor:
    """Generalised KL divergence ``sum(x ln(x/x_hat) - x + x_hat)``.

    Summed over cells and averaged over the leading batch axis; ``x`` is the
    (constant) target and cells with ``x == 0`` contribute just ``x_hat``.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=x_hat.dtype)
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: target {x.shape} vs reconstruction {x_hat.shape}")
    if np.any(x < 0) or np.any(x_hat.data < 0):
        raise ValueError("generalised KL needs non-negative inputs")
    n = x.shape[0] if x.ndim > 2 else 1
    with np.errstate(divide="ignore", invalid="ignore"):
        xlogx = np.where(x > 0, x * np.log(np.where(x > 0, x, 1)), 0.0)
    const = float(np.sum(xlogx - x, dtype=np.float64))
    if np.any(x > 0) and np.any(x_hat.data[x > 0] == 0):
        raise ValueError("reconstruction is zero where the target is positive")
    # ln x_hat only matters where x > 0; elsewhere feed 1 so the log stays finite
    safe = F.add(F.mul(x_hat, (x > 0).astype(x.dtype)), (x <= 0).astype(x.dtype))
    per = F.add(F.sub(x_hat, F.mul(F.log(safe), x)), 0.0)
    return F.mul(F.add(F.sum(per), const), 1.0 / n)


def _unit_rows(a: Tensor, eps: float = 1e-8) -> Tensor:
    norm = F.sqrt(F.sum(F.mul(a, a), axis=1, keepdims=True))
    return F.div(a, F.add(norm, eps))


def similarity_logits(phi_a: Tensor, phi_w: Tensor, temperature: float) -> Tensor:
    """Cosine similarities between every audio row and every tag row, over ``temperature``."""
    return F.mul(F.matmul(_unit_rows(phi_a), F.transpose(_unit_rows(phi_w))), 1.0 / temperature)


def ntxent_from_logits(s: Tensor) -> Tensor:
    n = s.shape[0]
    eye = np.eye(n, dtype=s.dtype)
    a_to_w = F.sum(F.mul(F.log_softmax(s, axis=1), eye))
    w_to_a = F.sum(F.mul(F.log_softmax(s, axis=0), eye))
    return F.mul(F.add(a_to_w, w_to_a), -0.5 / n)


def ntxent_loss(phi_a: Tensor, phi_w: Tensor, temperature: float = 0.1) -> Tensor:
    """Symmetric cross-modal NT-Xent.

    Row ``i`` of each matrix is a positive pair; every other row of the other
    modality in the batch is a negative. The audio->tag and tag->audio
    cross-entropies are averaged.
    """
    if phi_a.shape != phi_w.shape or phi_a.ndim != 2:
        raise ValueError(f"expected two (N, D) matrices, got {phi_a.shape} and {phi_w.shape}")
    if phi_a.shape[0] < 2:
        raise ValueError("contrastive loss needs at least two pairs")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return ntxent_from_logits(similarity_logits(phi_a, phi_w, temperature))


@dataclass
class LossBreakdown:
    total: Tensor
    reconstruction: float
    contrastive: float

    def as_dict(self) -> dict:
        return {"loss_total": float(self.total.data), "loss_gkl": self.reconstruction,
                "loss_ntxent": self.contrastive}


def total_loss(model, patches: np.ndarray, z_w: np.ndarray, mask: np.ndarray,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted reconstruction + contrastive loss for one minibatch."""
    x_hat, phi_a, phi_w, _ = model(patches, z_w, mask)
    rec = gkl_loss(patches, x_hat)
    con = ntxent_loss(phi_a, phi_w, weights.temperature)
    total = F.add(F.mul(rec, weights.reconstruction), F.mul(con, weights.contrastive))
    return LossBreakdown(total, float(rec.data), float(con.data))
