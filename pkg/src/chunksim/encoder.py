"""Shared acoustic encoder and output head.

A compact Conformer-style stack (self-attention, convolution module,
feed-forward, layer norms) used unchanged for whole utterances and for
context-sensitive chunks.  Positions outside the utterance are masked out of
attention and zeroed before the convolution, so a chunk that happens to cover
the whole utterance reproduces the full-context computation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

MASK_BIAS = -1e30


@dataclass
class EncoderConfig:
    d_in: int = 80
    blocks: int = 2
    d_model: int = 64
    heads: int = 2
    d_ff: int = 128
    conv_kernel: int = 7
    subsample: int = 1
    vocab: int = 8  # content tokens; the head has vocab + 1 outputs

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.subsample not in (1, 2, 4):
            raise ValueError("subsample rate must be 1, 2 or 4")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")


PAPER_SCALE = dict(blocks=12, d_model=256, heads=4, d_ff=2048, subsample=4)


def init_params(cfg: EncoderConfig, rng, dtype=np.float64) -> dict:
    p = {}
    d = cfg.d_model

    def dense(name, n_in, n_out):
        p[name + ".w"] = rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out))
        p[name + ".b"] = np.zeros(n_out)

    def norm(name, n):
        p[name + ".g"] = np.ones(n)
        p[name + ".b"] = np.zeros(n)

    dense("enc.input", cfg.d_in * cfg.subsample, d)
    for i in range(cfg.blocks):
        pre = f"enc.block{i}."
        norm(pre + "att_norm", d)
        dense(pre + "att_q", d, d)
        dense(pre + "att_k", d, d)
        dense(pre + "att_v", d, d)
        dense(pre + "att_out", d, d)
        norm(pre + "conv_norm", d)
        dense(pre + "conv_in", d, 2 * d)
        p[pre + "conv_dw.w"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.conv_kernel), (cfg.conv_kernel, d))
        p[pre + "conv_dw.b"] = np.zeros(d)
        dense(pre + "conv_out", d, d)
        norm(pre + "ff_norm", d)
        dense(pre + "ff1", d, cfg.d_ff)
        dense(pre + "ff2", cfg.d_ff, d)
        norm(pre + "out_norm", d)
    dense("head", d, cfg.vocab + 1)
    return {k: v.astype(dtype) for k, v in p.items()}


def _linear(x, params, name):
    return tn.matmul(x, params[name + ".w"]) + params[name + ".b"]


def _norm(x, params, name):
    return tn.layer_norm(x, params[name + ".g"], params[name + ".b"])


def sinusoidal(positions: np.ndarray, d: int) -> np.ndarray:
    """Absolute sinusoidal encodings for integer ``positions`` (any shape)."""
    i = np.arange(d // 2)
    angle = positions[..., None] / (10000.0 ** (2 * i / d))
    pe = np.zeros(positions.shape + (d,))
    pe[..., 0::2] = np.sin(angle)
    pe[..., 1::2] = np.cos(angle)
    return pe


def subsample(x: Tensor, valid: np.ndarray, r: int):
    """Stack r consecutive frames: (B, L, d) -> (B, ceil(L/r), r*d)."""
    if r == 1:
        return x, valid
    B, L, d = x.shape
    Lr = -(-L // r)
    extra = Lr * r - L
    if extra:
        x = tn.concat([x, Tensor(np.zeros((B, extra, d)))], axis=1)
        valid = np.concatenate([valid, np.zeros((B, extra), dtype=bool)], axis=1)
    return x.reshape((B, Lr, r * d)), valid.reshape(B, Lr, r).any(axis=2)


def _attention(x, valid, params, pre, heads):
    B, L, d = x.shape
    dh = d // heads

    def split(t):
        return tn.transpose(t.reshape((B, L, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(x, params, pre + "att_q"))
    k = split(_linear(x, params, pre + "att_k"))
    v = split(_linear(x, params, pre + "att_v"))
    scores = tn.scale(tn.matmul(q, tn.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    bias = np.where(valid, 0.0, MASK_BIAS)[:, None, None, :].astype(x.data.dtype)
    attn = tn.softmax(scores, bias=bias)
    ctx = tn.transpose(tn.matmul(attn, v), (0, 2, 1, 3)).reshape((B, L, d))
    return _linear(ctx, params, pre + "att_out"), attn


def encode(x, valid, params: dict, cfg: EncoderConfig, return_attention=False):
    """Encode (B, L, d_in) frames with validity (B, L).

    Returns hidden states (B, ceil(L/r), d_model) and the subsampled
    validity.  Positions are counted from each sequence's first valid frame.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape((1,) + x.shape)
    valid = np.asarray(valid, dtype=bool).reshape(x.shape[:2])
    if x.shape[-1] != cfg.d_in:
        raise ValueError(f"input dim {x.shape[-1]} != {cfg.d_in}")
    dtype = x.data.dtype
    x = tn.mul(x, valid[..., None].astype(dtype))
    x, valid = subsample(x, valid, cfg.subsample)
    h = _linear(x, params, "enc.input")
    first = np.argmax(valid, axis=1)
    pos = np.maximum(np.arange(valid.shape[1])[None, :] - first[:, None], 0)
    h = h + sinusoidal(pos, cfg.d_model).astype(dtype)
    keep = valid[..., None].astype(dtype)
    attns = []
    for i in range(cfg.blocks):
        pre = f"enc.block{i}."
        a, attn = _attention(_norm(h, params, pre + "att_norm"), valid, params, pre, cfg.heads)
        attns.append(attn.data)
        h = h + a
        c = tn.glu(_linear(_norm(h, params, pre + "conv_norm"), params, pre + "conv_in"))
        c = tn.depthwise_conv1d(tn.mul(c, keep), params[pre + "conv_dw.w"], params[pre + "conv_dw.b"])
        h = h + _linear(tn.swish(c), params, pre + "conv_out")
        f = _linear(tn.swish(_linear(_norm(h, params, pre + "ff_norm"), params, pre + "ff1")), params, pre + "ff2")
        h = _norm(h + f, params, pre + "out_norm")
    if return_attention:
        return h, valid, attns
    return h, valid


def discard_context(outputs, left: int, chunk: int, r: int = 1):
    """Keep the chunk-center rows of encoder outputs over a spliced chunk."""
    if left % r or chunk % r:
        raise ValueError("context and chunk lengths must be multiples of the subsampling rate")
    lo, hi = left // r, (left + chunk) // r
    if outputs.ndim == 2:
        return outputs[lo:hi]
    return outputs[:, lo:hi]


def project(hidden, params: dict) -> Tensor:
    """Linear map to vocab + 1 classes followed by log-softmax."""
    return tn.log_softmax(_linear(hidden, params, "head"))
