"""One parameter set shared by the full-context and chunked forward passes,
plus the simulation module.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import chunking, encoder, simu
from .chunking import ContextMode
from .io import load_checkpoint, save_checkpoint
from .tensor import Tensor, concat, get_dtype, take


@dataclass
class ModelConfig:
    encoder: encoder.EncoderConfig = field(default_factory=encoder.EncoderConfig)
    simu: simu.SimuConfig = field(default_factory=simu.SimuConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = encoder.EncoderConfig(**self.encoder)
        if isinstance(self.simu, dict):
            self.simu = simu.SimuConfig(**self.simu)
        if self.encoder.d_in != self.simu.d_mel:
            raise ValueError("encoder input dim and simulation d_mel differ")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def small(cls, d_mel=80, vocab=8, n_future=40, **enc):
        return cls(encoder.EncoderConfig(d_in=d_mel, vocab=vocab, **enc), simu.SimuConfig(d_mel=d_mel, n_future=n_future))


class Model:
    """Named parameter tensors plus the configuration that shapes them."""

    def __init__(self, config: ModelConfig, params: dict):
        self.config = config
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, seed: int = 0) -> "Model":
        rng = np.random.default_rng(seed)
        raw = {**encoder.init_params(config.encoder, rng), **simu.init_params(config.simu, rng)}
        dtype = get_dtype()
        return cls(config, {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in raw.items()})

    @property
    def r(self) -> int:
        return self.config.encoder.subsample

    def arrays(self) -> dict:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        dtype = get_dtype()
        for k, v in arrays.items():
            if self.params[k].shape != tuple(v.shape):
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k] = Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)

    def num_params(self, prefix="") -> int:
        return sum(v.size for k, v in self.params.items() if k.startswith(prefix))

    def save(self, path) -> None:
        save_checkpoint(path, self.arrays())
        with open(str(path) + ".json", "w") as f:
            json.dump(self.config.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Model":
        with open(str(path) + ".json") as f:
            config = ModelConfig(**json.load(f))
        model = cls.init(config)
        model.load_arrays(load_checkpoint(path))
        return model


def _pad_batch(feats):
    T = max(f.shape[0] for f in feats)
    d = feats[0].shape[1]
    x = np.zeros((len(feats), T, d), dtype=get_dtype())
    valid = np.zeros((len(feats), T), dtype=bool)
    for b, f in enumerate(feats):
        x[b, : f.shape[0]] = f
        valid[b, : f.shape[0]] = True
    return x, valid


def forward_full(model: Model, feats) -> list:
    """Full-context log-posteriors, one Tensor (ceil(T/r), V+1) per utterance."""
    x, valid = _pad_batch(feats)
    h, _ = encoder.encode(Tensor(x), valid, model.params, model.config.encoder)
    logp = encoder.project(h, model.params)
    r = model.r
    return [logp[b, : chunking.output_length(f.shape[0], r)] for b, f in enumerate(feats)]


def simulate_batch(model: Model, feats, chunk_size: int):
    """Teacher-forced simulation for every chunk of every utterance.

    The GRU runs once over each (normalised) utterance; the top-layer state at
    each chunk's last real frame is mapped to N future frames.  Returns a
    Tensor (B, K_max, N, d) and per-utterance chunk counts.
    """
    x, _ = _pad_batch(feats)
    B, Tmax, _ = x.shape
    top, _ = simu.encode_sequence(model.params, Tensor(x))
    Ks = [-(-f.shape[0] // chunk_size) for f in feats]
    Kmax = max(Ks)
    idx = np.zeros((B, Kmax), dtype=np.int64)
    for b, f in enumerate(feats):
        ends = np.minimum((np.arange(Kmax) + 1) * chunk_size, f.shape[0]) - 1
        idx[b] = b * Tmax + ends
    H = top.shape[-1]
    states = take(top.reshape((B * Tmax, H)), idx, axis=0)
    return simu.predict_future(states, model.params), Ks


def forward_chunks(model: Model, feats, plans, sim=None, return_valid=False):
    """Chunked (streaming-path) log-posteriors per utterance.

    ``sim`` is the (B, K_max, N, d) Tensor from :func:`simulate_batch`, needed
    when the plans use SIMULATED mode.
    """
    blocks, valids, counts = [], [], []
    for b, (f, plan) in enumerate(zip(feats, plans)):
        sim_ctx = None
        if plan.mode is ContextMode.SIMULATED:
            sim_ctx = sim[b, : plan.K]
        t, v = chunking.chunk_tensor(np.asarray(f, dtype=get_dtype()), plan, sim_ctx)
        blocks.append(t)
        valids.append(v)
        counts.append(plan.K)
    lens = {b.shape[1] for b in blocks}
    if len(lens) != 1:
        raise ValueError("all plans in a batch must share chunk and context sizes")
    x = concat(blocks, axis=0) if len(blocks) > 1 else blocks[0]
    valid = np.concatenate(valids, axis=0)
    h, _ = encoder.encode(x, valid, model.params, model.config.encoder)
    p0 = plans[0]
    center = encoder.discard_context(h, p0.left, p0.chunk_size, model.r)
    logp = encoder.project(center, model.params)
    out, start = [], 0
    for plan, K in zip(plans, counts):
        out.append(chunking.format_utt(logp[start:start + K], plan, model.r))
        start += K
    return out
