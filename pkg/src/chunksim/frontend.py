"""Feature extraction: framing, log-Mel filterbank, causal normalisation.

Also builds the ground-truth future frames each chunk's simulator is
trained to predict.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FRAME_MS = 10
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-5


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = np.asarray(self.samples, dtype=np.float64)


@dataclass
class FeatureSequence:
    frames: np.ndarray
    frame_period_ms: int = FRAME_MS
    normalized: bool = False

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class FutureTarget:
    """Per-chunk ground-truth future frames (K, N, d) and validity (K, N)."""

    frames: np.ndarray
    mask: np.ndarray


def frame_signal(w: Waveform, window_ms: float = 25, hop_ms: float = 10) -> np.ndarray:
    """Split into Hann-windowed frames, shape (T, window_samples)."""
    win = int(round(w.sample_rate * window_ms / 1000))
    hop = int(round(w.sample_rate * hop_ms / 1000))
    n = w.samples.shape[0]
    if n < win:
        raise ValueError(f"signal has {n} samples, shorter than one {win}-sample window")
    count = 1 + (n - win) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(count)[:, None]
    return w.samples[idx] * np.hanning(win + 2)[1:-1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    return edges[1:-1]


def mel_filterbank(n_mels: int, sample_rate: int, n_fft: int = 512) -> np.ndarray:
    """Triangular filters on the FFT bin frequencies, shape (n_mels, n_fft//2+1)."""
    if n_mels < 1:
        raise ValueError("n_mels must be >= 1")
    edges = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.sum(axis=1) == 0)
    if empty.size:
        raise ValueError(f"{n_mels} Mel bins exceed the FFT resolution (bin {empty[0]} is empty)")
    return fb


def log_mel(frames: np.ndarray, n_mels: int = 80, sample_rate: int = 16000, n_fft: int = 512) -> FeatureSequence:
    """Power spectrum -> Mel filterbank -> natural log with a 1e-10 floor."""
    if frames.shape[1] > n_fft:
        raise ValueError("frame longer than the FFT size")
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    energy = power @ mel_filterbank(n_mels, sample_rate, n_fft).T
    return FeatureSequence(np.log(np.maximum(energy, LOG_FLOOR)))


class OnlineMVN:
    """Running mean/variance normaliser (Welford), strictly causal.

    Frame ``t`` is normalised with statistics of frames ``0..t``.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.float64)
        out = np.empty_like(frames)
        for t, x in enumerate(frames):
            self.count += 1
            delta = x - self.mean
            self.mean = self.mean + delta / self.count
            self.m2 = self.m2 + delta * (x - self.mean)
            std = np.maximum(np.sqrt(self.m2 / self.count), STD_FLOOR)
            out[t] = (x - self.mean) / std
        return out


def online_mvn(x: FeatureSequence) -> FeatureSequence:
    if x.normalized:
        raise ValueError("features are already normalised")
    frames = OnlineMVN(x.dim)(x.frames)
    return FeatureSequence(frames, x.frame_period_ms, normalized=True)


def shift_future(x: FeatureSequence, plan, n: int) -> FutureTarget:
    """Real frames ``[end_k, end_k + n)`` for every chunk ``k`` of ``plan``.

    ``end_k`` is the chunk's right boundary; frames past the utterance end
    are zero and masked out.
    """
    if n <= 0:
        raise ValueError("number of future frames must be positive")
    frames = np.asarray(x.frames)
    T = frames.shape[0]
    if plan.T != T:
        raise ValueError(f"plan covers {plan.T} frames, features have {T}")
    idx = (np.arange(plan.K)[:, None] + 1) * plan.chunk_size + np.arange(n)[None, :]
    mask = idx < T
    out = np.zeros((plan.K, n, frames.shape[1]), dtype=frames.dtype)
    out[mask] = frames[idx[mask]]
    return FutureTarget(out, mask)
