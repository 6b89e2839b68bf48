"""Synthetic token-to-feature corpus.

Each token owns a smooth spectral profile in log-Mel space; an utterance is
leading silence, then every token's profile held for a random duration with
short silences in between, plus Gaussian noise.  Features are written in the
frontend's file formats so the rest of the pipeline cannot tell them from
extracted ones.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .frontend import FeatureSequence
from .io import ManifestEntry, save_features, write_manifest


@dataclass
class SynthSpec:
    vocab_size: int = 8
    d_mel: int = 80
    frames_per_token: tuple = (6, 12)
    silence_frames: tuple = (1, 4)
    edge_silence: tuple = (3, 8)
    onset_frames: int = 0
    noise_std: float = 0.25
    seed: int = 0
    templates: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.frames_per_token = tuple(self.frames_per_token)
        self.silence_frames = tuple(self.silence_frames)
        self.edge_silence = tuple(self.edge_silence)
        if self.templates is None:
            self.templates = make_templates(self.vocab_size, self.d_mel, self.seed)
        self.templates = np.asarray(self.templates, dtype=np.float64)
        if self.templates.shape != (self.vocab_size + 1, self.d_mel):
            raise ValueError("templates must be (vocab_size + 1, d_mel); row 0 is silence")
        gap = min_template_distance(self.templates)
        need = 4 * self.noise_std * np.sqrt(self.d_mel)
        if gap <= need:
            raise ValueError(f"templates too close for the noise level ({gap:.3f} <= {need:.3f})")

    def to_json(self) -> str:
        d = asdict(self)
        d.pop("templates")
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


def make_templates(vocab_size: int, d_mel: int, seed: int) -> np.ndarray:
    """Row 0: flat silence floor; rows 1..V: three spectral peaks over that floor.

    Silence sits at the tokens' baseline so that per-dimension normalisation of
    a silence/token alternation keeps the token's spectral shape.
    """
    rng = np.random.default_rng([seed, 7919])
    bins = np.arange(d_mel)
    out = np.empty((vocab_size + 1, d_mel))
    out[0] = -2.5
    for k in range(1, vocab_size + 1):
        centers = np.sort(rng.uniform(0, d_mel, 3))
        widths = rng.uniform(0.04, 0.12, 3) * d_mel
        heights = rng.uniform(3.0, 6.0, 3)
        shape = (heights[:, None] * np.exp(-0.5 * ((bins[None] - centers[:, None]) / widths[:, None]) ** 2)).sum(0)
        out[k] = -2.5 + shape
    return out


def min_template_distance(templates) -> float:
    diff = templates[:, None, :] - templates[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    return float(dist[~np.eye(len(templates), dtype=bool)].min())


@dataclass
class Utterance:
    utt_id: str
    features: FeatureSequence
    label: list

    def __post_init__(self):
        if not self.label:
            raise ValueError("empty label")


def utterance_rng(seed: int, index: int):
    return np.random.default_rng([seed, index])


def synth_utterance(spec: SynthSpec, label, rng, utt_id="utt", durations=None) -> Utterance:
    """Render ``label`` to features; ``durations`` overrides the random token lengths."""
    label = [int(t) for t in label]
    if not label:
        raise ValueError("empty label")
    if min(label) < 1 or max(label) > spec.vocab_size:
        raise ValueError(f"token ids must lie in 1..{spec.vocab_size}")
    tpl = spec.templates
    segments = []

    def silence(lo, hi):
        n = int(rng.integers(lo, hi + 1))
        segments.append(np.repeat(tpl[:1], n, axis=0))

    silence(*spec.edge_silence)
    for i, tok in enumerate(label):
        if i:
            silence(*spec.silence_frames)
        n = int(durations[i]) if durations is not None else int(rng.integers(spec.frames_per_token[0], spec.frames_per_token[1] + 1))
        seg = np.repeat(tpl[tok][None], n, axis=0)
        ramp = min(spec.onset_frames, n)
        for j in range(ramp):
            w = (j + 1) / (ramp + 1)
            seg[j] = (1 - w) * tpl[0] + w * tpl[tok]
        segments.append(seg)
    silence(*spec.edge_silence)
    frames = np.concatenate(segments)
    if spec.noise_std > 0:
        frames = frames + rng.normal(0.0, spec.noise_std, frames.shape)
    if frames.shape[0] < 2 * len(label) + 1:
        raise ValueError("utterance too short for CTC")
    return Utterance(utt_id, FeatureSequence(frames.astype(np.float32)), label)


def random_label(spec: SynthSpec, length_range, rng) -> list:
    n = int(rng.integers(length_range[0], length_range[1] + 1))
    return [int(t) for t in rng.integers(1, spec.vocab_size + 1, size=n)]


def generate(spec: SynthSpec, n_utts: int, length_range=(3, 7), prefix="utt") -> list:
    """In-memory corpus; utterance ``i`` depends only on (spec.seed, i)."""
    out = []
    for i in range(n_utts):
        rng = utterance_rng(spec.seed, i)
        label = random_label(spec, length_range, rng)
        out.append(synth_utterance(spec, label, rng, utt_id=f"{prefix}{i:05d}"))
    return out


def split_counts(n: int) -> tuple:
    """80/10/10 split sizes summing to n."""
    n_dev = n // 10
    n_test = n // 10
    return n - n_dev - n_test, n_dev, n_test


def make_corpus(spec: SynthSpec, n_utts: int, out_dir, length_range=(3, 7)) -> dict:
    """Write feature files, per-split manifests and synth.json; return manifest paths."""
    if n_utts < 1:
        raise ValueError("n_utts must be >= 1")
    out_dir = Path(out_dir)
    (out_dir / "feats").mkdir(parents=True, exist_ok=True)
    utts = generate(spec, n_utts, length_range)
    sizes = split_counts(n_utts)
    paths, start = {}, 0
    for name, size in zip(("train", "dev", "test"), sizes):
        entries = []
        for u in utts[start:start + size]:
            p = out_dir / "feats" / f"{u.utt_id}.feat"
            save_features(p, u.features.frames)
            entries.append(ManifestEntry(u.utt_id, p, u.label))
        paths[name] = out_dir / f"{name}.manifest"
        write_manifest(paths[name], entries)
        start += size
    (out_dir / "synth.json").write_text(spec.to_json() + "\n")
    return paths
