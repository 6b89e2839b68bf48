"""CTC loss, greedy and prefix-beam decoding, and character error rate.

Blank is class 0; content tokens are 1..V.
"""
from __future__ import annotations

import math
from collections import defaultdict

import numpy as np

from . import kernels
from .tensor import Tensor

BLANK = 0


class LabelError(ValueError):
    """Invalid label sequence (empty, or containing the blank id)."""


def extend_labels(labels) -> np.ndarray:
    """Interleave blanks: (a, b) -> (0, a, 0, b, 0)."""
    labels = np.asarray(labels, dtype=np.int64)
    ext = np.zeros(2 * len(labels) + 1, dtype=np.int64)
    ext[1::2] = labels
    return ext


def min_frames(labels) -> int:
    """Shortest posterior sequence that can emit ``labels`` under CTC."""
    labels = list(labels)
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def _validate(logp, labels):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise LabelError("empty label sequence")
    if np.any(labels == BLANK):
        raise LabelError("label contains the blank id")
    if logp.shape[0] == 0:
        raise ValueError("empty posterior sequence")
    if labels.max() >= logp.shape[1]:
        raise LabelError("label id exceeds the vocabulary")
    return labels


class CtcLattice:
    """Forward/backward log-scores of one (posterior, label) pair."""

    def __init__(self, logp, labels, backend=None):
        labels = _validate(logp, labels)
        self.ext = extend_labels(labels)
        self.logp = np.asarray(logp, dtype=np.float64)
        self.alpha, self.beta = kernels.ctc_forward_backward(self.logp, self.ext, backend=backend)

    @property
    def forward_total(self) -> float:
        return float(np.logaddexp.reduce(self.alpha[-1, -2:]))

    @property
    def backward_total(self) -> float:
        first = self.beta[0, :2] + self.logp[0, self.ext[:2]]
        return float(np.logaddexp.reduce(first))

    def occupancy(self):
        """Posterior occupation of every (t, class), shape (T, V+1)."""
        total = self.forward_total
        post = np.exp(self.alpha + self.beta - total)
        occ = np.zeros_like(self.logp)
        for s, k in enumerate(self.ext):
            occ[:, k] += post[:, s]
        return occ


def ctc_loss_value(logp, labels) -> float:
    """Negative log-likelihood; ``inf`` when no alignment exists."""
    lat = CtcLattice(logp, labels)
    total = lat.forward_total
    return -total if np.isfinite(total) else math.inf


def ctc_loss(logp: Tensor, labels) -> Tensor:
    """Differentiable CTC loss of one utterance.

    ``logp`` holds log-probabilities (T', V+1).  Infeasible pairs give an
    infinite loss and a zero gradient.
    """
    lat = CtcLattice(logp.data, labels)
    total = lat.forward_total
    if not np.isfinite(total):
        return Tensor._make(np.array(np.inf), (logp,), lambda g: (np.zeros(logp.shape, dtype=g.dtype),))
    occ = lat.occupancy()

    def backward(g):
        return ((-occ * g).astype(logp.data.dtype),)

    return Tensor._make(np.array(-total), (logp,), backward)


def greedy_decode(logp) -> list[int]:
    """Per-frame argmax, collapse repeats, drop blanks."""
    best = np.asarray(logp).argmax(axis=-1)
    out, prev = [], None
    for k in best:
        k = int(k)
        if k != prev and k != BLANK:
            out.append(k)
        prev = k
    return out


def prefix_beam_decode(logp, beam: int | None = 8) -> list[int]:
    """CTC prefix beam search without a language model.

    ``beam=None`` keeps every prefix (exact search, exponential cost).  Note
    that ``beam=1`` is not guaranteed to reproduce greedy decoding.
    """
    if beam is not None and beam < 1:
        raise ValueError("beam must be >= 1")
    logp = np.asarray(logp, dtype=np.float64)
    ninf = -math.inf
    # prefix -> (log P ending in blank, log P ending in non-blank)
    beams = {(): (0.0, ninf)}
    for t in range(logp.shape[0]):
        row = logp[t]
        nxt = defaultdict(lambda: [ninf, ninf])
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            entry = nxt[prefix]
            entry[0] = np.logaddexp(entry[0], total + row[BLANK])
            if prefix:
                last = prefix[-1]
                entry[1] = np.logaddexp(entry[1], pnb + row[last])
            for k in range(1, row.shape[0]):
                ext = prefix + (k,)
                e = nxt[ext]
                if prefix and prefix[-1] == k:
                    e[1] = np.logaddexp(e[1], pb + row[k])
                else:
                    e[1] = np.logaddexp(e[1], total + row[k])
        ranked = sorted(nxt.items(), key=lambda kv: -np.logaddexp(*kv[1]))
        if beam is not None:
            ranked = ranked[:beam]
        beams = {p: (v[0], v[1]) for p, v in ranked}
    best = max(beams.items(), key=lambda kv: np.logaddexp(*kv[1]))
    return list(best[0])


def edit_distance(hyp, ref) -> int:
    return kernels.edit_distance(list(hyp), list(ref))


def cer(hyp, ref) -> float:
    """Edit distance divided by reference length."""
    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    return edit_distance(hyp, ref) / len(ref)


def corpus_cer(pairs) -> float:
    """Total edits over total reference tokens for (hyp, ref) pairs."""
    edits = total = 0
    for hyp, ref in pairs:
        edits += edit_distance(hyp, ref)
        total += len(ref)
    if total == 0:
        raise ValueError("no reference tokens")
    return edits / total


def scoring_report(ids, hyps, refs) -> dict:
    """Per-utterance and corpus CER in a JSON-serialisable dict."""
    rows = [
        {"id": i, "hyp": list(map(int, h)), "ref": list(map(int, r)), "cer": cer(h, r)}
        for i, h, r in zip(ids, hyps, refs)
    ]
    return {"corpus_cer": corpus_cer(zip(hyps, refs)), "utterances": rows}
