"""End-to-end desk-scale experiments on the synthetic corpus."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, downstream as D, synthetic, tags as T
from .model import AlignmentModel
from .pipeline import WordVectors, build_word_vectors
from .trainer import PairedDataset, TrainConfig, train


@dataclass
class SyntheticCorpus:
    clips: list[synthetic.Clip]
    logmels: list[np.ndarray]
    patches: np.ndarray

    @classmethod
    def generate(cls, n: int, seed: int, prefix: str = "clip", seconds: float = 3.0) -> "SyntheticCorpus":
        clips = synthetic.generate(n, seed=seed, seconds=seconds, prefix=prefix)
        logmels = [audio.stft_logmel(c.samples) for c in clips]
        return cls(clips, logmels, np.stack([audio.select_max_energy_patch(l) for l in logmels]))

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips])


def paired(corpus: SyntheticCorpus, wv: WordVectors, stats: audio.ScalingStats) -> PairedDataset:
    sets = [T.preprocess_tags(c.tags, wv.vocab) for c in corpus.clips]
    scaled, _ = audio.scale_unit_interval(corpus.patches, stats)
    return PairedDataset(scaled, np.stack([T.tag_indices(s, wv.vocab) for s in sets]), [c.id for c in corpus.clips])


def stratified_halves(labels: np.ndarray) -> list[str]:
    """Alternate train/test within each class."""
    seen: dict[int, int] = {}
    out = []
    for y in labels:
        k = seen.get(int(y), 0)
        out.append("train" if k % 2 == 0 else "test")
        seen[int(y)] = k + 1
    return out


@dataclass
class AlignmentOutcome:
    variant: str
    retrieval_top1: float
    probe: D.ProbeResult
    mfcc: D.ProbeResult
    untrained: D.ProbeResult
    seconds: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


def alignment_probe(variant: str = "w2v-128-1h", n_train: int = 400, n_task: int = 200, epochs: int = 30,
                    batch_size: int = 32, seed: int = 0, out_dir: str | Path | None = None,
                    probe_cfg: D.ProbeConfig = D.ProbeConfig()) -> AlignmentOutcome:
    """Train on one synthetic corpus, then evaluate on a separately generated one.

    The held-out corpus is used for class retrieval (each clip against the
    four class tag queries) and for the repeated MLP probe on a stratified
    half split; the MFCC baseline and an untrained encoder go through the same
    probe code.
    """
    t0 = time.perf_counter()
    corpus = SyntheticCorpus.generate(n_train, seed)
    held_out = SyntheticCorpus.generate(n_task, seed + 1, prefix="task")
    dim = int(variant.split("-")[1])
    wv = build_word_vectors([c.tags for c in corpus.clips], dim, seed=seed)
    stats = audio.fit_scaling(corpus.patches)
    data = paired(corpus, wv, stats)
    t1 = time.perf_counter()
    state = train(data, wv.table, TrainConfig(variant=variant, epochs=epochs, batch_size=batch_size, seed=seed),
                  out_dir)
    model = state.model.eval()
    t2 = time.perf_counter()

    z = D.extract_embeddings(model, held_out.logmels, stats)
    queries = [T.preprocess_tags(synthetic.class_query(c), wv.vocab) for c in range(synthetic.N_CLASSES)]
    zq = np.stack([T.embed_tags(q, wv.vocab, wv.table)[0] for q in queries])
    phi_q = D.tag_embeddings(model, zq, np.stack([q.mask for q in queries]))
    top1 = D.class_retrieval_accuracy(D.project(model, z), phi_q, held_out.labels)

    splits = stratified_halves(held_out.labels)
    probe = D.evaluate_features(z, held_out.labels, splits, probe_cfg, "synthetic-4class", variant)
    mf = np.stack([audio.mfcc_baseline(c.samples) for c in held_out.clips])
    mfcc = D.evaluate_features(mf, held_out.labels, splits, probe_cfg, "synthetic-4class", "mfcc")
    fresh = AlignmentModel(model.cfg, seed=seed).eval()
    untrained = D.evaluate_features(D.extract_embeddings(fresh, held_out.logmels, stats), held_out.labels, splits,
                                    probe_cfg, "synthetic-4class", f"{variant}-untrained")
    t3 = time.perf_counter()
    return AlignmentOutcome(variant, top1, probe, mfcc, untrained,
                            {"data": t1 - t0, "train": t2 - t1, "evaluate": t3 - t2, "total": t3 - t0},
                            state.history)
