"""Joint training of the autoencoder, tag encoder and projection head."""

from __future__ import annotations

import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensorfile
from .model import AlignmentModel, ModelConfig, VARIANTS, variant_config
from .objectives import LossWeights, total_loss
from .tags import lookup
from .tensor import NonFiniteError, SGD, clip_grad_norm, no_grad, rng as rngs

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "xaln-checkpoint"


class TrainingDiverged(RuntimeError):
    """A loss or activation became non-finite."""


class CheckpointError(ValueError):
    """A checkpoint cannot be used with the requested configuration."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "w2v-128-1h"
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.005
    seed: int = 0
    validation_fraction: float = 0.10
    reconstruction_weight: float = 5.0
    contrastive_weight: float = 10.0
    temperature: float = 0.1
    # summed reconstruction loss at lr 0.005 overshoots on the first step without a cap
    clip_grad_norm: float | None = 10.0
    max_steps: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 2 or self.lr < 0:
            raise ValueError("epochs must be >= 1, batch_size >= 2 and lr >= 0")
        if not 0 <= self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in [0, 1)")
        if self.clip_grad_norm is not None and self.clip_grad_norm <= 0:
            raise ValueError("clip_grad_norm must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        LossWeights(self.reconstruction_weight, self.contrastive_weight, self.temperature)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.reconstruction_weight, self.contrastive_weight, self.temperature)

    @property
    def model_config(self) -> ModelConfig:
        return variant_config(self.variant)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class PairedDataset:
    """Scaled patches paired with ``-1``-padded tag indices."""

    patches: np.ndarray
    tag_indices: np.ndarray
    ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.patches = np.asarray(self.patches, dtype=np.float32)
        self.tag_indices = np.asarray(self.tag_indices, dtype=np.int64)
        if len(self.patches) != len(self.tag_indices):
            raise ValueError("patches and tag sets differ in length")
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.patches))]
        if np.any((self.tag_indices >= 0).sum(axis=1) == 0):
            raise ValueError("every example needs at least one tag")

    def __len__(self) -> int:
        return len(self.patches)

    def subset(self, idx) -> "PairedDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(self.patches[idx], self.tag_indices[idx], [self.ids[i] for i in idx])


def split_dataset(n: int, fraction: float = 0.10, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle of ``range(n)`` split into (train, validation) index arrays."""
    if n < 10:
        raise ValueError(f"need at least 10 examples to split, got {n}")
    perm = rngs.stream(seed, "data").permutation(n)
    n_val = int(round(fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainState:
    model: AlignmentModel
    config: TrainConfig
    epoch: int = 0
    step: int = 0
    best_val: float = float("inf")
    shuffle_rng: np.random.Generator | None = None
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def fresh_state(cfg: TrainConfig) -> TrainState:
    model = AlignmentModel(cfg.model_config, seed=cfg.seed)
    return TrainState(model, cfg, shuffle_rng=rngs.stream(cfg.seed, "shuffle"))


def _batch_loss(model, ds: PairedDataset, idx, table, weights):
    z_w, mask = lookup(ds.tag_indices[idx], table)
    return total_loss(model, ds.patches[idx], z_w, mask, weights)


def evaluate(model: AlignmentModel, ds: PairedDataset, table: np.ndarray, weights: LossWeights,
             batch_size: int) -> dict | None:
    """Size-weighted mean losses over near-equal chunks of ``ds``, in eval mode."""
    if len(ds) < 2:
        return None
    was_training = model.training
    model.eval()
    totals = np.zeros(3)
    try:
        with no_grad():
            for chunk in np.array_split(np.arange(len(ds)), max(1, len(ds) // batch_size)):
                b = _batch_loss(model, ds, chunk, table, weights).as_dict()
                totals += len(chunk) * np.array([b["loss_total"], b["loss_gkl"], b["loss_ntxent"]])
    finally:
        model.train(was_training)
    t, g, c = totals / len(ds)
    return {"loss_total": float(t), "loss_gkl": float(g), "loss_ntxent": float(c)}


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(state: TrainState, path: str | Path, table_digest: str = "") -> None:
    meta = {
        "kind": CHECKPOINT_KIND,
        "train_config": state.config.to_dict(),
        "model_config": state.model.cfg.to_dict(),
        "config_digest": tensorfile.digest(state.model.cfg.to_dict()),
        "table_digest": table_digest,
        "epoch": state.epoch,
        "step": state.step,
        "best_val": state.best_val if np.isfinite(state.best_val) else None,
        "optimizer": {"name": "sgd", "lr": state.config.lr},
        "rng": {"dropout": rngs.get_state(state.model.dropout_rng),
                "shuffle": rngs.get_state(state.shuffle_rng)},
        "history": state.history,
        "extra": state.extra,
    }
    tensors = {f"param/{k}": v for k, v in state.model.state_dict().items()}
    tensorfile.save(path, tensors, meta)


def load_checkpoint(path: str | Path, expect: ModelConfig | None = None) -> TrainState:
    """Rebuild the training state saved by :func:`save_checkpoint`."""
    tensors, meta = tensorfile.load(path)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise tensorfile.TensorFileError(f"{path}: not a training checkpoint")
    mcfg = ModelConfig.from_dict(meta["model_config"])
    if expect is not None and expect != mcfg:
        raise CheckpointError(f"checkpoint config {mcfg.to_dict()} does not match requested {expect.to_dict()}")
    cfg = TrainConfig.from_dict(meta["train_config"])
    state = fresh_state(cfg)
    state.model.load_state_dict({k[len("param/"):]: v for k, v in tensors.items()})
    rngs.set_state(state.model.dropout_rng, meta["rng"]["dropout"])
    rngs.set_state(state.shuffle_rng, meta["rng"]["shuffle"])
    state.epoch, state.step = meta["epoch"], meta["step"]
    state.best_val = float("inf") if meta["best_val"] is None else meta["best_val"]
    state.history = list(meta["history"])
    state.extra = dict(meta.get("extra", {}))
    return state


def load_model(path: str | Path) -> AlignmentModel:
    model = load_checkpoint(path).model
    model.eval()
    return model


# -- training loop ---------------------------------------------------------------

def _append_jsonl(path: Path, records: list[dict]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _dump_divergence(out: Path | None, state: TrainState, batch_ids: list[str], exc: Exception) -> str:
    info = {"epoch": state.epoch + 1, "step": state.step, "batch_ids": batch_ids, "error": str(exc),
            "recent_step_losses": state.step_losses[-20:]}
    if out is not None:
        tensorfile.atomic_write_text(out / "divergence.json", json.dumps(info, indent=1))
    return json.dumps(info)


def train(data: PairedDataset, table: np.ndarray, cfg: TrainConfig, out_dir: str | Path | None = None,
          state: TrainState | None = None, stop_after_epoch: int | None = None,
          on_epoch: Callable[[TrainState], None] | None = None, extra: dict | None = None) -> TrainState:
    """Run (or resume) training.

    Each epoch reshuffles the training indices with the run's shuffle stream,
    takes full minibatches only, and takes one SGD step per batch. Validation
    runs in eval mode after every epoch. With ``out_dir`` set, per-epoch
    metrics are appended to ``metrics.jsonl`` and ``last``, ``best`` and
    ``final`` checkpoints are written. ``stop_after_epoch`` ends the run early
    (the ``last`` checkpoint can then be resumed via ``state``).
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    if table.shape[1] != cfg.model_config.tags.word_dim:
        raise CheckpointError(f"variant {cfg.variant} expects {cfg.model_config.tags.word_dim}-dim word "
                              f"embeddings, table has {table.shape[1]}")
    train_idx, val_idx = (split_dataset(len(data), cfg.validation_fraction, cfg.seed)
                          if cfg.validation_fraction > 0 else (np.arange(len(data)), np.arange(0)))
    train_ds, val_ds = data.subset(train_idx), data.subset(val_idx)
    if len(train_ds) < cfg.batch_size:
        raise ValueError(f"training split has {len(train_ds)} examples, fewer than one batch of {cfg.batch_size}")
    if state is None:
        state = fresh_state(cfg)
        state.extra.update(extra or {})
    if state.config != cfg:
        raise CheckpointError("resume state was created with a different training config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if state.epoch == 0:
            (out / "metrics.jsonl").unlink(missing_ok=True)
    tdigest = tensorfile.array_digest(table)
    model, weights = state.model, cfg.weights
    opt = SGD(model.parameters(), cfg.lr)
    n_batches = len(train_ds) // cfg.batch_size
    last_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)

    while state.epoch < last_epoch:
        if cfg.max_steps is not None and state.step >= cfg.max_steps:
            break
        t0 = time.perf_counter()
        model.train()
        order = state.shuffle_rng.permutation(len(train_ds))
        sums = np.zeros(3)
        steps = 0
        for b in range(n_batches):
            if cfg.max_steps is not None and state.step >= cfg.max_steps:
                break
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            try:
                losses = _batch_loss(model, train_ds, idx, table, weights)
                if not np.isfinite(losses.total.data):
                    raise NonFiniteError("non-finite total loss")
                opt.zero_grad()
                losses.total.backward()
                if cfg.clip_grad_norm is not None:
                    clip_grad_norm(model.parameters(), cfg.clip_grad_norm)
            except NonFiniteError as exc:
                detail = _dump_divergence(out, state, [train_ds.ids[i] for i in idx], exc)
                raise TrainingDiverged(detail) from exc
            opt.step()
            d = losses.as_dict()
            sums += [d["loss_total"], d["loss_gkl"], d["loss_ntxent"]]
            state.step_losses.append(d["loss_total"])
            state.step += 1
            steps += 1
        state.epoch += 1
        train_rec = dict(zip(("loss_total", "loss_gkl", "loss_ntxent"), (sums / max(steps, 1)).tolist()))
        records = [{"epoch": state.epoch, "split": "train", **train_rec}]
        val = evaluate(model, val_ds, table, weights, cfg.batch_size)
        if val is not None:
            records.append({"epoch": state.epoch, "split": "validation", **val})
        state.history.extend(records)
        score = val["loss_total"] if val is not None else train_rec["loss_total"]
        improved = score < state.best_val
        if improved:
            state.best_val = score
        log.info("epoch %d: train %.4f val %s (%.1fs)", state.epoch, train_rec["loss_total"],
                 f"{val['loss_total']:.4f}" if val else "-", time.perf_counter() - t0)
        if out is not None:
            _append_jsonl(out / "metrics.jsonl", records)
            save_checkpoint(state, out / "last.ckpt", tdigest)
            if improved:
                shutil.copyfile(out / "last.ckpt", out / "best.ckpt.tmp")
                (out / "best.ckpt.tmp").replace(out / "best.ckpt")
        if on_epoch is not None:
            on_epoch(state)
    if out is not None and (state.epoch >= cfg.epochs or (cfg.max_steps is not None and state.step >= cfg.max_steps)):
        shutil.copyfile(out / "last.ckpt", out / "final.ckpt.tmp")
        (out / "final.ckpt.tmp").replace(out / "final.ckpt")
    return state


def resume(path: str | Path, data: PairedDataset, table: np.ndarray, out_dir: str | Path | None = None,
           **kwargs) -> TrainState:
    state = load_checkpoint(path)
    return train(data, table, state.config, out_dir, state=state, **kwargs)


def with_overrides(cfg: TrainConfig, **kw) -> TrainConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
