"""Desk-scale synthetic audio/tag corpus.

Each clip belongs to one of four classes. The class decides both its tags and
the mel bands that carry tonal energy: class ``c`` places tones at the centre
frequencies of every fourth band starting at ``TONE_LOW + c``. All classes
share the same frequency region and receive a random broadband coloured-noise
floor, so the coarse spectral envelope (which low-order cepstra summarise)
carries little class information while the fine band pattern carries all of
it. Tags are drawn from a class pool plus shared distractor words, with
plurals and stop words mixed in so the tag preprocessing is exercised.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import SAMPLE_RATE, mel_band_edges, write_wav
from .tensor import rng as rngs

N_CLASSES = 4
TONE_LOW, TONE_HIGH = 32, 80

CLASS_TAGS = (
    ("bell", "chime", "metallic", "ring", "glass"),
    ("organ", "drone", "pad", "warm", "hum"),
    ("flute", "airy", "breath", "whistle", "wind"),
    ("buzz", "reed", "harsh", "brass", "horn"),
)
SHARED_TAGS = ("field", "recording", "loop", "short", "long", "stereo", "mono", "sample")
NOISE_WORDS = ("the", "a", "and")


def class_bands(label: int) -> np.ndarray:
    return np.arange(TONE_LOW + label, TONE_HIGH, N_CLASSES)


def class_query(label: int) -> list[str]:
    """The full tag pool of a class, used as a retrieval query."""
    return list(CLASS_TAGS[label])


@dataclass
class Clip:
    id: str
    samples: np.ndarray
    tags: list[str]
    label: int


def synth_samples(label: int, rng: np.random.Generator, seconds: float = 3.0) -> np.ndarray:
    n = int(seconds * SAMPLE_RATE)
    t = np.arange(n) / SAMPLE_RATE
    centres = mel_band_edges()[1:-1]
    out = np.zeros(n)
    for b in class_bands(label):
        gain = 10 ** (rng.uniform(-9, 0) / 20)
        out += gain * np.sin(2 * np.pi * centres[b] * t + rng.uniform(0, 2 * np.pi))
    # tonal section switches on and off at random times so patch selection matters
    on = rng.uniform(0.0, max(seconds - 2.3, 0.0))
    env = np.clip((t - on) / 0.05, 0, 1) * np.clip((on + 2.3 - t) / 0.05, 0, 1)
    out *= env * 0.05
    # coloured noise with a random spectral tilt dominates the envelope
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1 / SAMPLE_RATE)
    tilt = rng.uniform(-1.5, 0.5)
    spec *= (1 + f / 500.0) ** tilt
    noise = np.fft.irfft(spec, n)
    noise *= rng.uniform(0.002, 0.01) / (np.std(noise) + 1e-12)
    return (out + noise).astype(np.float32)


def synth_tags(label: int, rng: np.random.Generator) -> list[str]:
    pool = CLASS_TAGS[label]
    own = list(rng.choice(pool, size=int(rng.integers(2, 5)), replace=False))
    shared = list(rng.choice(SHARED_TAGS, size=int(rng.integers(0, 3)), replace=False))
    tags = own + shared
    # inflect and pad with stop words some of the time
    tags = [t + "s" if rng.random() < 0.2 else t for t in tags]
    if rng.random() < 0.3:
        tags.append(str(rng.choice(NOISE_WORDS)))
    rng.shuffle(tags)
    return tags


def generate(n_clips: int, seed: int = 0, seconds: float = 3.0, prefix: str = "clip") -> list[Clip]:
    """Balanced clips: labels cycle through the classes, content is seeded."""
    rng = rngs.stream(seed, "data")
    clips = []
    for i in range(n_clips):
        label = i % N_CLASSES
        samples = synth_samples(label, rng, seconds)
        clips.append(Clip(f"{prefix}{i:05d}", samples, synth_tags(label, rng), label))
    return clips


def write_corpus(clips: list[Clip], out_dir: str | Path, test_fraction: float = 0.0,
                 seed: int = 0) -> Path:
    """Write WAV files and a JSON-lines manifest; returns the manifest path.

    With ``test_fraction`` > 0 every record gets a ``split`` of ``train`` or
    ``test`` (stratified by label).
    """
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    split = {}
    if test_fraction > 0:
        rng = rngs.stream(seed, "sampling")
        for label in sorted({c.label for c in clips}):
            ids = [c.id for c in clips if c.label == label]
            n_test = int(round(test_fraction * len(ids)))
            test = set(rng.permutation(ids)[:n_test].tolist())
            split.update({i: "test" if i in test else "train" for i in ids})
    manifest = out / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for c in clips:
            rel = f"audio/{c.id}.wav"
            write_wav(out / rel, c.samples)
            rec = {"id": c.id, "audio_path": rel, "tags": c.tags, "label": c.label}
            if c.id in split:
                rec["split"] = split[c.id]
            fh.write(json.dumps(rec) + "\n")
    return manifest
