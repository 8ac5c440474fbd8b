"""Log-mel front end: framing, mel filterbank, patch selection, scaling and MFCCs."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.io import wavfile

SAMPLE_RATE = 22050
N_FFT = 1024
HOP = 512
N_MELS = 96
PATCH_FRAMES = 96
LOG_FLOOR = 1e-10
N_MFCC = 20


class AudioError(ValueError):
    """Input audio violates the front-end contract."""


def load_audio(path: str | Path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Read a mono clip from a RIFF WAV (16-bit PCM, 32-bit PCM or float) or raw float32 LE file.

    Multi-channel WAVs are averaged to mono. No resampling is done.
    """
    path = Path(path)
    if path.suffix.lower() == ".wav":
        sr, data = wavfile.read(path)
        if sr != sample_rate:
            raise AudioError(f"{path}: sample rate {sr} Hz, expected {sample_rate} Hz")
        if data.dtype == np.int16:
            data = data.astype(np.float32) / 32768.0
        elif data.dtype == np.int32:
            data = data.astype(np.float32) / 2147483648.0
        elif data.dtype.kind == "f":
            data = data.astype(np.float32)
        else:
            raise AudioError(f"{path}: unsupported sample format {data.dtype}")
        if data.ndim == 2:
            data = data.mean(axis=1)
    else:
        data = np.fromfile(path, dtype="<f4").astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise AudioError(f"{path}: non-finite samples")
    return data


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    wavfile.write(Path(path), sample_rate, np.asarray(samples, dtype=np.float32))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int = N_MELS, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """``n_mels + 2`` frequencies (Hz): band ``b`` rises from edge b, peaks at b+1, falls to b+2."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))


@functools.lru_cache(maxsize=8)
def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """HTK-scale triangular filters, peak 1, shape ``(n_mels, n_fft // 2 + 1)``."""
    edges = mel_band_edges(n_mels, sample_rate)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    bank = np.maximum(0.0, np.minimum(rising, falling))
    bank.setflags(write=False)
    return bank


def frame_count(n_samples: int) -> int:
    if n_samples < N_FFT:
        raise AudioError(f"clip has {n_samples} samples; at least {N_FFT} are needed")
    return (n_samples - N_FFT) // HOP + 1


def power_spectrogram(samples: np.ndarray) -> np.ndarray:
    """Hamming-windowed 1024-point frames every 512 samples -> ``(T, 513)`` power."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise AudioError(f"expected mono samples, got shape {samples.shape}")
    if not np.all(np.isfinite(samples)):
        raise AudioError("non-finite samples")
    t = frame_count(len(samples))
    idx = np.arange(N_FFT)[None, :] + HOP * np.arange(t)[:, None]
    frames = samples[idx] * np.hamming(N_FFT)
    return np.abs(np.fft.rfft(frames, n=N_FFT, axis=1)) ** 2


def stft_logmel(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Natural-log mel-band energies, shape ``(frames, 96)``."""
    energy = power_spectrogram(samples) @ mel_filterbank(N_MELS, N_FFT, sample_rate).T
    return np.log(energy + LOG_FLOOR)


def pad_frames(logmel: np.ndarray, length: int = PATCH_FRAMES) -> np.ndarray:
    """Repeat the last frame until there are ``length`` frames."""
    if len(logmel) >= length:
        return logmel
    return np.concatenate([logmel, np.repeat(logmel[-1:], length - len(logmel), axis=0)])


def select_max_energy_patch(logmel: np.ndarray, length: int = PATCH_FRAMES) -> np.ndarray:
    """The contiguous ``length``-frame window with the largest summed energy.

    Energy is ``sum(exp(logmel))``; the earliest window wins ties, where
    windows within a relative 1e-12 of the maximum count as tied.
    """
    logmel = pad_frames(np.asarray(logmel), length)
    frame_energy = np.exp(logmel.astype(np.float64)).sum(axis=1)
    window = np.convolve(frame_energy, np.ones(length), mode="valid")
    start = int(np.flatnonzero(window >= window.max() * (1 - 1e-12))[0])
    return logmel[start:start + length]


@dataclass(frozen=True)
class ScalingStats:
    minimum: float
    maximum: float

    def to_dict(self) -> dict:
        return {"min": self.minimum, "max": self.maximum}

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingStats":
        return cls(float(d["min"]), float(d["max"]))


def fit_scaling(patches) -> ScalingStats:
    arrs = [np.asarray(p) for p in patches]
    if not arrs:
        raise AudioError("cannot fit scaling on an empty set")
    return ScalingStats(float(min(a.min() for a in arrs)), float(max(a.max() for a in arrs)))


def scale_unit_interval(patches, stats: ScalingStats | None = None):
    """Global min-max scaling to ``[0, 1]`` with clipping.

    ``stats`` fitted on the training split should be reused for other splits.
    A degenerate range maps everything to 0.5.
    """
    arr = np.asarray(patches, dtype=np.float64)
    if arr.size == 0:
        raise AudioError("cannot scale an empty set")
    stats = stats or fit_scaling([arr])
    span = stats.maximum - stats.minimum
    if span <= 0:
        return np.full(arr.shape, 0.5, dtype=np.float32), stats
    return np.clip((arr - stats.minimum) / span, 0.0, 1.0).astype(np.float32), stats


def deltas(feats: np.ndarray) -> np.ndarray:
    """Centred first difference along time with edge replication."""
    padded = np.pad(feats, ((1, 1), (0, 0)), mode="edge")
    return (padded[2:] - padded[:-2]) / 2.0


def mfcc_from_logmel(logmel: np.ndarray) -> np.ndarray:
    return dct(logmel, type=2, norm="ortho", axis=1)[:, :N_MFCC]


def mfcc_baseline(samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """120-d summary: per-coefficient means then stds of MFCCs, their deltas and delta-deltas."""
    c = mfcc_from_logmel(stft_logmel(samples, sample_rate))
    d1 = deltas(c)
    d2 = deltas(d1)
    return np.concatenate([c.mean(0), c.std(0), d1.mean(0), d1.std(0), d2.mean(0), d2.std(0)])
