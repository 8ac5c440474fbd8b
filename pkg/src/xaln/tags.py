"""Tag preprocessing, vocabulary building, CBOW word embeddings and tag lookup."""

from __future__ import annotations

import functools
import json
import logging
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from typing import Iterable, Sequence

import numpy as np

from .tensor import rng as rngs

log = logging.getLogger(__name__)

MAX_TAGS = 10
VOCAB_SIZE = 1000
MAX_DOC_FRACTION = 0.70

# irregular or ambiguous plurals the suffix rules get wrong
PLURAL_EXCEPTIONS = {
    "buses": "bus", "gases": "gas", "movies": "movie", "cookies": "cookie", "zombies": "zombie",
    "headaches": "headache", "caches": "cache", "niches": "niche", "children": "child",
    "people": "person", "men": "man", "women": "woman", "feet": "foot", "teeth": "tooth",
    "mice": "mouse", "geese": "goose", "leaves": "leaf", "wolves": "wolf", "knives": "knife",
    "lives": "life", "news": "news", "series": "series", "species": "species", "chaos": "chaos",
    "lens": "lens", "bus": "bus", "gas": "gas", "glitches": "glitch", "axes": "axe",
}
_NO_STRIP_ENDINGS = ("ss", "us", "is", "as")


class EmptyTagSetError(ValueError):
    """Every tag of an example was filtered out."""


class OutOfVocabularyError(KeyError):
    def __init__(self, token: str):
        super().__init__(token)
        self.token = token

    def __str__(self) -> str:
        return f"tag {self.token!r} is not in the vocabulary"


@functools.lru_cache(maxsize=1)
def stopwords() -> frozenset[str]:
    text = resources.files("xaln.data").joinpath("stopwords.txt").read_text(encoding="utf-8")
    return frozenset(w.strip() for w in text.splitlines() if w.strip() and not w.startswith("#"))


def singularize(word: str) -> str:
    """Suffix-rule singular form of an English noun."""
    if word in PLURAL_EXCEPTIONS:
        return PLURAL_EXCEPTIONS[word]
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if word.endswith(("sses", "xes", "ches", "shes")):
        return word[:-2]
    if len(word) > 3 and word.endswith("s") and not word.endswith(_NO_STRIP_ENDINGS):
        return word[:-1]
    return word


def normalize_tags(raw: Iterable[str]) -> list[str]:
    """Lowercase, drop stop words, singularise and deduplicate (first occurrence kept)."""
    stop = stopwords()
    out: list[str] = []
    for tag in raw:
        t = tag.strip().lower()
        if not t or t in stop:
            continue
        t = singularize(t)
        if t and t not in stop and t not in out:
            out.append(t)
    return out


@dataclass
class Vocabulary:
    tokens: list[str]
    doc_freq: dict[str, int]
    n_docs: int

    def __post_init__(self):
        self._index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def index(self, token: str) -> int:
        try:
            return self._index[token]
        except KeyError:
            raise OutOfVocabularyError(token) from None

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "doc_freq": {t: self.doc_freq[t] for t in self.tokens},
                "n_docs": self.n_docs}

    @classmethod
    def from_json(cls, d: dict) -> "Vocabulary":
        return cls(list(d["tokens"]), {k: int(v) for k, v in d["doc_freq"].items()}, int(d["n_docs"]))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=1, ensure_ascii=False)

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class TagSet:
    """Up to ``MAX_TAGS`` distinct tags, most frequent first."""

    tags: tuple[str, ...]

    def __post_init__(self):
        if not self.tags:
            raise EmptyTagSetError("a tag set needs at least one tag")
        if len(self.tags) > MAX_TAGS:
            raise ValueError(f"at most {MAX_TAGS} tags, got {len(self.tags)}")

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(MAX_TAGS, dtype=bool)
        m[: len(self.tags)] = True
        return m

    def __len__(self) -> int:
        return len(self.tags)


def preprocess_tags(raw: Sequence[str], vocab: Vocabulary | None = None,
                    max_tags: int = MAX_TAGS) -> TagSet:
    """Normalise a raw tag list into a :class:`TagSet`.

    With a vocabulary, out-of-vocabulary tags are dropped and tags are ordered
    by corpus document frequency (ties lexicographic); without one they are
    ordered lexicographically. Only the first ``max_tags`` are kept.
    """
    if not raw:
        raise EmptyTagSetError("empty raw tag list")
    tags = normalize_tags(raw)
    if vocab is not None:
        tags = [t for t in tags if t in vocab]
        tags.sort(key=lambda t: (-vocab.doc_freq[t], t))
    else:
        tags.sort()
    if not tags:
        raise EmptyTagSetError(f"no usable tags left in {list(raw)!r}")
    return TagSet(tuple(tags[:max_tags]))


def build_vocabulary(corpus: Sequence[Iterable[str]], size: int = VOCAB_SIZE,
                     max_doc_fraction: float = MAX_DOC_FRACTION) -> Vocabulary:
    """Drop tokens in more than ``max_doc_fraction`` of documents, keep the ``size`` most frequent."""
    if not corpus:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    df: Counter[str] = Counter()
    for doc in corpus:
        df.update(set(doc))
    limit = max_doc_fraction * len(corpus)
    survivors = sorted((t for t, c in df.items() if c <= limit), key=lambda t: (-df[t], t))
    if len(survivors) < size:
        log.warning("only %d tokens survive the document-frequency filter (wanted %d)", len(survivors), size)
    kept = survivors[:size]
    return Vocabulary(kept, {t: df[t] for t in kept}, len(corpus))


# -- CBOW with negative sampling -------------------------------------------------

@dataclass(frozen=True)
class Word2VecConfig:
    dim: int = 128
    epochs: int = 15
    lr: float = 0.025
    min_lr_fraction: float = 1e-4
    negatives: int = 5
    sample_power: float = 0.75
    seed: int = 0


def cbow_loss_and_grads(w_in: np.ndarray, w_out: np.ndarray, context: Sequence[int], target: int,
                        negatives: Sequence[int]):
    """Negative-sampling CBOW loss for one (context, target) pair and its gradients.

    The hidden vector is the mean of the context input vectors. Returns
    ``(loss, grad_hidden_rows, grad_out_rows)`` where the gradient dicts map a
    row index to its gradient (rows may repeat, so they are accumulated).
    """
    ctx = list(context)
    h = w_in[ctx].mean(axis=0)
    rows = [target] + list(negatives)
    labels = np.array([1.0] + [0.0] * len(negatives))
    scores = w_out[rows] @ h
    sig = 1.0 / (1.0 + np.exp(-scores))
    # -log sigma(s) for the positive, -log sigma(-s) for negatives
    loss = float(np.sum(np.logaddexp(0.0, -scores[:1])) + np.sum(np.logaddexp(0.0, scores[1:])))
    coef = sig - labels
    grad_h = coef @ w_out[rows]
    grad_out: dict[int, np.ndarray] = {}
    for r, c in zip(rows, coef):
        grad_out[r] = grad_out.get(r, 0.0) + c * h
    grad_in: dict[int, np.ndarray] = {}
    for c in ctx:
        grad_in[c] = grad_in.get(c, 0.0) + grad_h / len(ctx)
    return loss, grad_in, grad_out


class CbowModel:
    """Input/output embedding tables trained with negative-sampling CBOW."""

    def __init__(self, vocab_size: int, cfg: Word2VecConfig):
        self.cfg = cfg
        init = rngs.stream(cfg.seed, "init")
        self.w_in = (init.random((vocab_size, cfg.dim)) - 0.5) / cfg.dim
        self.w_out = np.zeros((vocab_size, cfg.dim))
        self.sampling = rngs.stream(cfg.seed, "sampling")
        self.shuffle = rngs.stream(cfg.seed, "shuffle")

    def step(self, context: Sequence[int], target: int, negatives: Sequence[int], lr: float) -> float:
        loss, g_in, g_out = cbow_loss_and_grads(self.w_in, self.w_out, context, target, negatives)
        for r, g in g_out.items():
            self.w_out[r] -= lr * g
        for r, g in g_in.items():
            self.w_in[r] -= lr * g
        return loss


def train_cbow(docs: Sequence[Sequence[int]], vocab_size: int, cfg: Word2VecConfig = Word2VecConfig(),
               counts: Sequence[int] | None = None) -> tuple[np.ndarray, list[float]]:
    """Train CBOW on documents of token indices; returns ``(input table, per-epoch mean loss)``.

    Each document is an unordered tag set: for every target tag the context is
    all other tags of the document. Documents with fewer than two tags are
    skipped. Negatives are drawn from the unigram distribution raised to
    ``sample_power``; draws equal to the target are skipped. The learning rate
    decays linearly over all training pairs.
    """
    if cfg.dim < 1:
        raise ValueError("embedding dimension must be positive")
    model = CbowModel(vocab_size, cfg)
    docs = [list(dict.fromkeys(d)) for d in docs]
    usable = [d for d in docs if len(d) >= 2]
    if counts is None:
        counts = np.bincount([t for d in docs for t in d], minlength=vocab_size)
    probs = np.asarray(counts, dtype=np.float64) ** cfg.sample_power
    probs = probs / probs.sum() if probs.sum() > 0 else np.full(vocab_size, 1.0 / vocab_size)
    total_pairs = cfg.epochs * sum(len(d) for d in usable)
    done = 0
    history: list[float] = []
    for _ in range(cfg.epochs):
        order = model.shuffle.permutation(len(usable)) if usable else []
        losses = []
        for di in order:
            doc = usable[di]
            for target in doc:
                context = [t for t in doc if t != target]
                draws = model.sampling.choice(vocab_size, size=cfg.negatives, p=probs)
                negatives = [int(n) for n in draws if n != target]
                lr = cfg.lr * max(cfg.min_lr_fraction, 1.0 - done / max(total_pairs, 1))
                losses.append(model.step(context, target, negatives, lr))
                done += 1
        history.append(float(np.mean(losses)) if losses else float("nan"))
    return model.w_in.astype(np.float32), history


def embed_tags(tagset: TagSet, vocab: Vocabulary, table: np.ndarray,
               max_tags: int = MAX_TAGS) -> tuple[np.ndarray, np.ndarray]:
    """Word-embedding rows for the tags (zero rows for padding) and the validity mask."""
    if not len(tagset):
        raise EmptyTagSetError("empty tag set")
    z = np.zeros((max_tags, table.shape[1]), dtype=table.dtype)
    mask = np.zeros(max_tags, dtype=bool)
    for i, tag in enumerate(tagset.tags):
        z[i] = table[vocab.index(tag)]
        mask[i] = True
    return z, mask


def tag_indices(tagset: TagSet, vocab: Vocabulary, max_tags: int = MAX_TAGS) -> np.ndarray:
    """Vocabulary indices padded with -1."""
    idx = np.full(max_tags, -1, dtype=np.int64)
    for i, tag in enumerate(tagset.tags):
        idx[i] = vocab.index(tag)
    return idx


def lookup(indices: np.ndarray, table: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Batched :func:`embed_tags` on ``-1``-padded index arrays."""
    mask = indices >= 0
    z = table[np.where(mask, indices, 0)] * mask[..., None]
    return z.astype(table.dtype), mask
