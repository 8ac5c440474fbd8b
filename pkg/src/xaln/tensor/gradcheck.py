"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from .autograd import Tensor, backward, no_grad


@dataclass
class GradCheckResult:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int


def relative_error(a: float, n: float, floor: float = 1e-8) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _allocate(sizes: list[int], n_samples: int | None) -> list[int]:
    """Entries to check per tensor: all of them, or ``n_samples`` split by size with one minimum."""
    if n_samples is None:
        return list(sizes)
    counts = [1] * len(sizes)
    spare = max(0, n_samples - len(sizes))
    weights = np.asarray(sizes, dtype=np.float64) - 1
    if spare and weights.sum() > 0:
        extra = np.floor(spare * weights / weights.sum()).astype(int)
        # hand leftovers to the largest tensors
        for i in np.argsort(-weights)[: spare - int(extra.sum())]:
            extra[i] += 1
        counts = [min(s, c + int(e)) for s, c, e in zip(sizes, counts, extra)]
    return counts


def check_gradients(loss_fn: Callable[[], Tensor], params: Sequence[tuple[str, Tensor]],
                    n_samples: int | None = None, eps: float = 1e-5,
                    rng: np.random.Generator | None = None,
                    before_eval: Callable[[], None] | None = None,
                    freeze_relu: bool = False, floor: float | None = None) -> list[GradCheckResult]:
    """Compare the tape gradient of ``loss_fn()`` with central differences.

    ``params`` are (name, tensor) pairs whose ``.data`` is perturbed in place.
    With ``n_samples`` set, that many entries are sampled across all tensors
    (proportionally to size, at least one each); otherwise every entry is
    checked. ``before_eval`` runs before every evaluation, e.g. to rewind a
    dropout generator so all passes see the same masks. ``freeze_relu``
    replays the ReLU masks of the unperturbed pass on the perturbed ones.

    Relative errors use ``max(|analytic|, |numeric|, floor)`` as denominator;
    by default the floor is ``1e-6 * max(1, |loss|)``, below which a central
    difference of the loss is dominated by round-off.
    """
    rng = rng or np.random.default_rng(0)
    patterns = F.ReluPatterns() if freeze_relu else None
    for _, p in params:
        p.grad = None
    if before_eval:
        before_eval()
    F.set_relu_patterns(patterns)
    try:
        loss = loss_fn()
        backward(loss)
    finally:
        F.set_relu_patterns(None)
    if floor is None:
        floor = 1e-6 * max(1.0, abs(float(loss.data)))
    analytic = {name: (p.grad if p.grad is not None else np.zeros_like(p.data)).copy() for name, p in params}

    def evaluate() -> float:
        if before_eval:
            before_eval()
        if patterns is not None:
            patterns.rewind()
        F.set_relu_patterns(patterns)
        try:
            with no_grad():
                return float(loss_fn().data)
        finally:
            F.set_relu_patterns(None)

    counts = _allocate([p.size for _, p in params], n_samples)
    results = []
    for (name, p), k in zip(params, counts):
        flat_idx = np.arange(p.size) if k == p.size else rng.choice(p.size, size=k, replace=False)
        worst = None
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            orig = p.data[idx].copy()
            p.data[idx] = orig + eps
            up = evaluate()
            p.data[idx] = orig - eps
            down = evaluate()
            p.data[idx] = orig
            num = (up - down) / (2 * eps)
            a = float(analytic[name][idx])
            err = relative_error(a, num, floor)
            if worst is None or err >= worst[0]:
                worst = (err, tuple(int(i) for i in idx), a, num)
        results.append(GradCheckResult(name, worst[0], worst[1], worst[2], worst[3], len(flat_idx)))
    for _, p in params:
        p.grad = None
    return results
