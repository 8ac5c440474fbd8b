"""Finite-difference verification of every op and of the full training objective."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import AlignmentModel, ModelConfig
from .objectives import LossWeights, gkl_loss, ntxent_loss, total_loss
from .tensor import Tensor, check_gradients, functional as F, precision, rng as rngs


@dataclass
class SuiteReport:
    entries: list = field(default_factory=list)  # (name, max_rel_error, n_checked)
    seconds: float = 0.0

    @property
    def worst(self) -> tuple:
        return max(self.entries, key=lambda e: e[1])

    @property
    def max_rel_error(self) -> float:
        return self.worst[1]


def _param(r, shape, offset=0.0, scale=1.0):
    return Tensor(r.standard_normal(shape) * scale + offset, requires_grad=True)


def _op_cases(r: np.random.Generator):
    """(name, loss closure, params) for each differentiable primitive on small random inputs."""
    x = _param(r, (2, 2, 6, 6))
    w = _param(r, (3, 2, 4, 4))
    b = _param(r, (3,))
    wt = _param(r, (3, 2, 4, 4))
    b2 = _param(r, (2,))
    coef = r.standard_normal((2, 3, 3, 3))
    coef_t = r.standard_normal((2, 3, 3, 3))
    yield "conv2d", lambda: F.sum(F.mul(F.conv2d(x, w, b, 2, 1), coef)), [("x", x), ("w", w), ("b", b)]
    xt = _param(r, (2, 3, 3, 3))
    coef_up = r.standard_normal((2, 2, 6, 6))
    yield ("conv_transpose2d", lambda: F.sum(F.mul(F.conv_transpose2d(xt, wt, b2, 2, 1), coef_up)),
           [("x", xt), ("w", wt), ("b", b2)])
    g, be = _param(r, (3,), 1.0, 0.2), _param(r, (3,))
    yield ("batch_norm", lambda: F.sum(F.mul(F.batch_norm(xt, g, be, np.zeros(3), np.ones(3), True), coef_t)),
           [("x", xt), ("gamma", g), ("beta", be)])
    v = _param(r, (3, 7))
    g7, b7 = _param(r, (7,), 1.0, 0.2), _param(r, (7,))
    c7 = r.standard_normal((3, 7))
    yield "layer_norm", lambda: F.sum(F.mul(F.layer_norm(v, g7, b7), c7)), [("x", v), ("gamma", g7), ("beta", b7)]
    yield "relu", lambda: F.sum(F.mul(F.relu(v), c7)), [("x", v)]
    yield "sigmoid", lambda: F.sum(F.mul(F.sigmoid(v), c7)), [("x", v)]
    yield "exp", lambda: F.sum(F.mul(F.exp(F.mul(v, 0.3)), c7)), [("x", v)]
    pos = Tensor(r.random((3, 7)) + 0.2, requires_grad=True)
    yield "log", lambda: F.sum(F.mul(F.log(pos), c7)), [("x", pos)]
    yield "softmax", lambda: F.sum(F.mul(F.softmax(v, -1, np.arange(7) != 3), c7)), [("x", v)]
    m1, m2 = _param(r, (2, 3, 4)), _param(r, (4, 5))
    yield "matmul", lambda: F.sum(F.mul(F.matmul(m1, m2), F.matmul(m1, m2))), [("a", m1), ("b", m2)]
    c14 = r.standard_normal((3, 14))
    yield "concat", lambda: F.sum(F.mul(F.concat([v, F.mul(v, v)], axis=1), c14)), [("x", v)]
    yield "sum/mean", lambda: F.sum(F.mul(F.sum(v, axis=0), F.mean(v, axis=0))), [("x", v)]
    keep_seed = int(r.integers(1 << 30))
    yield "dropout", lambda: F.sum(F.mul(F.dropout(v, 0.3, np.random.default_rng(keep_seed), True), c7)), [("x", v)]
    xa = np.clip(r.random((2, 3, 3)), 0.05, 1.0)
    xh = Tensor(r.random((2, 3, 3)) * 0.8 + 0.1, requires_grad=True)
    yield "gkl_loss", lambda: gkl_loss(xa, xh), [("x_hat", xh)]
    pa, pw = _param(r, (4, 6)), _param(r, (4, 6))
    yield "ntxent_loss", lambda: ntxent_loss(pa, pw, 0.1), [("phi_a", pa), ("phi_w", pw)]


def check_ops(seed: int = 0) -> list[tuple[str, float, int]]:
    r = np.random.default_rng(seed)
    out = []
    with precision(np.float64):
        for name, fn, params in _op_cases(r):
            res = check_gradients(fn, params)
            out.append((name, max(x.max_rel_error for x in res), sum(x.n_checked for x in res)))
    return out


def check_full_objective(cfg: ModelConfig, seed: int = 0, batch: int = 4, n_samples: int = 200,
                         weights: LossWeights = LossWeights(),
                         freeze_relu: bool = True) -> list[tuple[str, float, int]]:
    """Finite-difference check of the weighted objective over sampled model parameters.

    Runs at float64 in training mode; the dropout stream is rewound before
    each evaluation so every pass sees the same masks, and by default the
    ReLU on/off pattern of the unperturbed pass is replayed as well.
    """
    r = np.random.default_rng(seed)
    with precision(np.float64):
        model = AlignmentModel(cfg, seed=seed)
    model.train()
    x = np.clip(r.random((batch, 96, 96)), 0.0, 1.0)
    z = r.standard_normal((batch, cfg.tags.max_tags, cfg.tags.word_dim))
    mask = np.zeros((batch, cfg.tags.max_tags), dtype=bool)
    for i in range(batch):
        mask[i, :1 + i % cfg.tags.max_tags] = True
    drop_state = rngs.get_state(model.dropout_rng)
    buffers = {k: v.copy() for k, v in model.named_buffers()}

    def rewind():
        rngs.set_state(model.dropout_rng, drop_state)
        for k, v in model.named_buffers():
            v[...] = buffers[k]

    params = list(model.named_parameters())
    with precision(np.float64):
        res = check_gradients(lambda: total_loss(model, x, z, mask, weights).total, params,
                              n_samples=n_samples, rng=r, before_eval=rewind, freeze_relu=freeze_relu)
    return [(f"model.{x.name}", x.max_rel_error, x.n_checked) for x in res]


def run_suite(cfg: ModelConfig, seed: int = 0, n_samples: int = 200) -> SuiteReport:
    t0 = time.perf_counter()
    report = SuiteReport(entries=check_ops(seed) + check_full_objective(cfg, seed, n_samples=n_samples))
    report.seconds = time.perf_counter() - t0
    return report
