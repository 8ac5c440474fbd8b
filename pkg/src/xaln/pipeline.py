"""On-disk pipeline: manifests, prepared patch files and word-embedding bundles."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import audio, tags as T, tensorfile
from .audio import ScalingStats
from .trainer import PairedDataset

log = logging.getLogger(__name__)

PATCH_SUFFIX = ".xt"


class ManifestError(ValueError):
    pass


@dataclass
class Record:
    id: str
    audio_path: Path
    tags: list[str]
    label: int | None = None
    split: str | None = None


def read_manifest(path: str | Path) -> list[Record]:
    """JSON-lines records; audio paths resolve relative to the manifest's folder."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records, seen = [], set()
    for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}:{n}: invalid JSON ({exc.msg})") from None
        unknown = set(d) - {"id", "audio_path", "tags", "label", "split"}
        if unknown or "id" not in d or "audio_path" not in d:
            raise ManifestError(f"{path}:{n}: records need id and audio_path; unknown keys {sorted(unknown)}")
        rid = str(d["id"])
        if rid in seen:
            raise ManifestError(f"{path}:{n}: duplicate id {rid!r}")
        seen.add(rid)
        label = d.get("label")
        records.append(Record(rid, path.parent / d["audio_path"], [str(t) for t in d.get("tags", [])],
                              None if label is None else int(label), d.get("split")))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    return records


def _safe_name(rid: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in rid)


def prepare(manifest: str | Path, out: str | Path) -> dict:
    """Compute the max-energy patch, full log-mel and MFCC summary of every clip.

    Writes ``patches/<id>.xt`` per clip, ``index.jsonl`` and ``scaling.json``
    (min/max over all patches). Returns the scaling stats as a dict.
    """
    records = read_manifest(manifest)
    out = Path(out)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    index, patches = [], []
    for r in records:
        try:
            samples = audio.load_audio(r.audio_path)
        except (OSError, audio.AudioError) as exc:
            raise ManifestError(f"clip {r.id}: {exc}") from None
        logmel = audio.stft_logmel(samples).astype(np.float32)
        patch = audio.select_max_energy_patch(logmel)
        mfcc = audio.mfcc_baseline(samples).astype(np.float32)
        rel = f"patches/{_safe_name(r.id)}{PATCH_SUFFIX}"
        tensorfile.save(out / rel, {"patch": patch, "logmel": logmel, "mfcc": mfcc}, {"id": r.id})
        index.append({"id": r.id, "file": rel, "tags": r.tags, "label": r.label, "split": r.split})
        patches.append(patch)
    stats = audio.fit_scaling(np.stack(patches))
    tensorfile.atomic_write_text(out / "index.jsonl", "".join(json.dumps(i, sort_keys=True) + "\n" for i in index))
    tensorfile.atomic_write_text(out / "scaling.json", json.dumps(stats.to_dict(), sort_keys=True))
    return stats.to_dict()


@dataclass
class Prepared:
    ids: list[str]
    patches: np.ndarray
    logmels: list[np.ndarray]
    mfcc: np.ndarray
    tags: list[list[str]]
    labels: list[int | None]
    splits: list[str | None]
    stats: ScalingStats


def load_prepared(folder: str | Path) -> Prepared:
    folder = Path(folder)
    if not (folder / "index.jsonl").is_file():
        raise ManifestError(f"{folder} is not a prepared data folder (run prepare-data first)")
    index = [json.loads(l) for l in (folder / "index.jsonl").read_text(encoding="utf-8").splitlines() if l]
    stats = ScalingStats.from_dict(json.loads((folder / "scaling.json").read_text()))
    patches, logmels, mfcc = [], [], []
    for item in index:
        t, _ = tensorfile.load(folder / item["file"])
        patches.append(t["patch"])
        logmels.append(t["logmel"])
        mfcc.append(t["mfcc"])
    return Prepared([i["id"] for i in index], np.stack(patches), logmels, np.stack(mfcc),
                    [i["tags"] for i in index], [i["label"] for i in index], [i["split"] for i in index], stats)


# -- word embeddings -------------------------------------------------------------

@dataclass
class WordVectors:
    vocab: T.Vocabulary
    table: np.ndarray
    config: dict

    @property
    def dim(self) -> int:
        return int(self.table.shape[1])


def build_word_vectors(tag_lists: list[list[str]], dim: int, seed: int = 0, epochs: int = 15,
                       size: int = T.VOCAB_SIZE) -> WordVectors:
    docs = [T.normalize_tags(t) for t in tag_lists]
    docs = [d for d in docs if d]
    if not docs:
        raise ValueError("empty tag corpus")
    vocab = T.build_vocabulary(docs, size=size)
    if len(vocab) == 0:
        raise ValueError("no tag survives the vocabulary filters")
    indexed = [[vocab.index(t) for t in d if t in vocab] for d in docs]
    cfg = T.Word2VecConfig(dim=dim, epochs=epochs, seed=seed)
    table, history = T.train_cbow(indexed, len(vocab), cfg)
    return WordVectors(vocab, table, {"dim": dim, "epochs": epochs, "seed": seed, "loss_history": history})


def save_word_vectors(wv: WordVectors, out: str | Path) -> None:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    tensorfile.save(out / "table.xt", {"table": wv.table}, {"config": wv.config, "vocab_size": len(wv.vocab)})
    tensorfile.atomic_write_text(out / "vocab.json", json.dumps(wv.vocab.to_json(), indent=1, ensure_ascii=False))


def load_word_vectors(folder: str | Path) -> WordVectors:
    folder = Path(folder)
    t, meta = tensorfile.load(folder / "table.xt")
    vocab = T.Vocabulary.load(folder / "vocab.json")
    if len(vocab) != t["table"].shape[0]:
        raise ManifestError(f"{folder}: vocabulary and table sizes differ")
    return WordVectors(vocab, t["table"], meta["config"])


def tag_matrix(tag_lists: list[list[str]], vocab: T.Vocabulary) -> tuple[np.ndarray, list[int]]:
    """``-1``-padded index rows for examples with at least one in-vocabulary tag, plus their positions."""
    rows, keep = [], []
    for i, tags in enumerate(tag_lists):
        try:
            ts = T.preprocess_tags(tags, vocab)
        except T.EmptyTagSetError:
            continue
        rows.append(T.tag_indices(ts, vocab))
        keep.append(i)
    dropped = len(tag_lists) - len(keep)
    if dropped:
        log.warning("%d examples have no usable tags and are excluded", dropped)
    return (np.stack(rows) if rows else np.zeros((0, T.MAX_TAGS), dtype=np.int64)), keep


def paired_dataset(prep: Prepared, wv: WordVectors) -> PairedDataset:
    idx, keep = tag_matrix(prep.tags, wv.vocab)
    if not keep:
        raise ValueError("no example has a usable tag set")
    scaled, _ = audio.scale_unit_interval(prep.patches[keep], prep.stats)
    return PairedDataset(scaled, idx, [prep.ids[i] for i in keep])


def query_tagset(raw: list[str], vocab: T.Vocabulary) -> T.TagSet:
    """Preprocess a user query, failing on the first out-of-vocabulary tag."""
    norm = T.normalize_tags(raw)
    if not norm:
        raise T.EmptyTagSetError(f"no usable tags in query {raw!r}")
    for t in norm:
        vocab.index(t)
    return T.preprocess_tags(norm, vocab)
