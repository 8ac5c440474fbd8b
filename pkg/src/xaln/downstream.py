"""Frozen-feature evaluation: clip embeddings, an MLP probe, repeated runs, retrieval."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorfile
from .audio import PATCH_FRAMES, ScalingStats, pad_frames, scale_unit_interval
from .model import AlignmentModel
from .tensor import Tensor, functional as F, nn, no_grad, rng as rngs
from .tensor.optim import SGD

STD_EPS = 1e-8


@dataclass(frozen=True)
class ProbeConfig:
    hidden: int = 256
    repeats: int = 10
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 32

    def __post_init__(self):
        if min(self.hidden, self.repeats, self.epochs, self.batch_size) < 1 or self.lr <= 0:
            raise ValueError(f"invalid probe config {self}")


# -- embedding extraction --------------------------------------------------------

def clip_patches(logmel: np.ndarray, length: int = PATCH_FRAMES) -> np.ndarray:
    """Consecutive non-overlapping patches.

    A trailing remainder of at least half a patch is padded into one more
    patch; shorter remainders are dropped. Clips shorter than one patch are
    padded to a single patch.
    """
    logmel = np.asarray(logmel)
    full, rem = divmod(len(logmel), length)
    patches = [logmel[i * length:(i + 1) * length] for i in range(full)]
    if rem >= length // 2 or full == 0:
        patches.append(pad_frames(logmel[full * length:], length))
    return np.stack(patches)


def extract_embeddings(model: AlignmentModel, logmels: Sequence[np.ndarray], stats: ScalingStats,
                       batch_size: int = 32) -> np.ndarray:
    """Mean eval-mode encoder embedding of each clip's patches, ``(n_clips, V)``."""
    per_clip = [clip_patches(lm) for lm in logmels]
    counts = [len(p) for p in per_clip]
    flat, _ = scale_unit_interval(np.concatenate(per_clip), stats)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            z = np.concatenate([model.encode_audio(flat[i:i + batch_size]).data
                                for i in range(0, len(flat), batch_size)])
    finally:
        model.train(was_training)
    bounds = np.cumsum([0] + counts)
    return np.stack([z[a:b].mean(axis=0) for a, b in zip(bounds[:-1], bounds[1:])]).astype(np.float64)


def extract_clip_embedding(model: AlignmentModel, logmel: np.ndarray, stats: ScalingStats) -> np.ndarray:
    return extract_embeddings(model, [logmel], stats)[0]


def tag_embeddings(model: AlignmentModel, z_w: np.ndarray, mask: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode contextual tag embeddings for a batch of padded tag sets."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            out = [model.attend_tags(z_w[i:i + batch_size], mask[i:i + batch_size]).data
                   for i in range(0, len(z_w), batch_size)]
    finally:
        model.train(was_training)
    return np.concatenate(out).astype(np.float64)


def standardize(train: np.ndarray, *others: np.ndarray):
    """Z-score every array with the training split's per-dimension statistics.

    Returns ``(train_std, [others_std...], (mean, std))``.
    """
    train = np.asarray(train, dtype=np.float64)
    if len(train) < 2:
        raise ValueError("need at least two training vectors to standardise")
    mu, sigma = train.mean(axis=0), train.std(axis=0)
    f = lambda a: (np.asarray(a, dtype=np.float64) - mu) / (sigma + STD_EPS)
    return f(train), [f(o) for o in others], (mu, sigma)


# -- probe -----------------------------------------------------------------------

class MLPProbe(nn.Module):
    def __init__(self, n_in: int, hidden: int, n_classes: int, rng: np.random.Generator):
        super().__init__()
        self.hidden = nn.Linear(n_in, hidden, rng)
        self.out = nn.Linear(hidden, n_classes, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.out(F.relu(self.hidden(x)))

    def predict(self, x: np.ndarray) -> np.ndarray:
        with no_grad():
            return np.argmax(self(Tensor(x.astype(np.float32))).data, axis=1)


def train_probe(x_train: np.ndarray, y_train: np.ndarray, x_test: np.ndarray, y_test: np.ndarray,
                cfg: ProbeConfig = ProbeConfig(), seed: int = 0) -> tuple[float, MLPProbe]:
    """Standardise, fit the probe with minibatch SGD on cross-entropy, return test accuracy."""
    y_train, y_test = np.asarray(y_train), np.asarray(y_test)
    n_classes = int(max(y_train.max(), y_test.max() if len(y_test) else 0)) + 1
    if len(np.unique(y_train)) < 2:
        raise ValueError("the probe needs at least two classes in the training split")
    xs, (xt,), _ = standardize(x_train, x_test)
    xs, xt = xs.astype(np.float32), xt.astype(np.float32)
    r = rngs.stream(seed, "probe")
    probe = MLPProbe(xs.shape[1], cfg.hidden, n_classes, r)
    opt = SGD(probe.parameters(), cfg.lr)
    for _ in range(cfg.epochs):
        order = r.permutation(len(xs))
        for i in range(0, len(xs), cfg.batch_size):
            idx = order[i:i + cfg.batch_size]
            loss = F.cross_entropy(probe(Tensor(xs[idx])), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    acc = float(np.mean(probe.predict(xt) == y_test)) if len(y_test) else float("nan")
    return acc, probe


@dataclass
class ProbeResult:
    task: str
    variant: str
    per_run_accuracies: list[float]
    mean: float
    std: float
    config_digest: str
    probe_config: dict
    protocol: str

    def to_dict(self) -> dict:
        return asdict(self)


def _folds(splits: Sequence[str]) -> list[tuple[np.ndarray, np.ndarray]]:
    splits = np.asarray([str(s) for s in splits])
    values = set(splits.tolist())
    if values <= {"train", "test"}:
        if values != {"train", "test"}:
            raise ValueError("a train/test protocol needs both splits")
        return [(np.flatnonzero(splits == "train"), np.flatnonzero(splits == "test"))]
    if len(values) < 2:
        raise ValueError("cross-validation needs at least two folds")
    return [(np.flatnonzero(splits != f), np.flatnonzero(splits == f)) for f in sorted(values)]


def evaluate_features(features: np.ndarray, labels: Sequence[int], splits: Sequence[str],
                      cfg: ProbeConfig = ProbeConfig(), task: str = "task", variant: str = "features",
                      config_digest: str = "", first_seed: int = 0) -> ProbeResult:
    """Mean and std of probe accuracy over ``cfg.repeats`` runs with consecutive seeds from ``first_seed``.

    ``splits`` holds ``train``/``test`` for a fixed split, otherwise fold
    identifiers; with folds a run's accuracy is the mean over held-out folds.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    folds = _folds(splits)
    runs = []
    for seed in range(first_seed, first_seed + cfg.repeats):
        accs = [train_probe(features[tr], labels[tr], features[te], labels[te], cfg, seed)[0] for tr, te in folds]
        runs.append(float(np.mean(accs)))
    protocol = "fixed-split" if len(folds) == 1 else f"{len(folds)}-fold"
    return ProbeResult(task, variant, runs, float(np.mean(runs)), float(np.std(runs)), config_digest,
                       asdict(cfg), protocol)


def evaluate_task(model: AlignmentModel, logmels: Sequence[np.ndarray], labels, splits, stats: ScalingStats,
                  cfg: ProbeConfig = ProbeConfig(), task: str = "task", variant: str = "") -> ProbeResult:
    feats = extract_embeddings(model, logmels, stats)
    return evaluate_features(feats, labels, splits, cfg, task, variant or "encoder",
                             tensorfile.digest(model.cfg.to_dict()))


def evaluate_tags(model: AlignmentModel, z_w: np.ndarray, mask: np.ndarray, labels, splits,
                  cfg: ProbeConfig = ProbeConfig(), task: str = "tags", variant: str = "") -> ProbeResult:
    feats = tag_embeddings(model, z_w, mask)
    return evaluate_features(feats, labels, splits, cfg, task, variant or "tag-encoder",
                             tensorfile.digest(model.cfg.to_dict()))


# -- cross-modal retrieval -------------------------------------------------------

def _unit(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a / (np.linalg.norm(a, axis=-1, keepdims=True) + 1e-8)


def project(model: AlignmentModel, z_a: np.ndarray) -> np.ndarray:
    with no_grad():
        return model.project_audio(Tensor(np.asarray(z_a, dtype=np.float32))).data.astype(np.float64)


def rank(query: np.ndarray, index: np.ndarray, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Indices and cosine scores of ``index`` rows sorted by similarity to ``query`` (stable)."""
    scores = _unit(index) @ _unit(query)
    order = np.argsort(-scores, kind="stable")
    if k is not None:
        order = order[:k]
    return order, scores[order]


def class_retrieval_accuracy(phi_audio: np.ndarray, phi_queries: np.ndarray, labels) -> float:
    """Top-1 accuracy of picking each clip's class query by cosine similarity."""
    sims = _unit(phi_audio) @ _unit(phi_queries).T
    return float(np.mean(np.argmax(sims, axis=1) == np.asarray(labels)))
