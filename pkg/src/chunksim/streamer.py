"""Online recognition session with per-chunk latency accounting.

Frames are normalised on arrival; whenever a chunk (plus, in REAL mode, its
right context) is complete, the simulation GRU advances over the chunk's
real frames, the chunk is spliced with its left history and right context,
encoded, and the center posteriors are emitted.  Emitted blocks are never
revised.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import chunking, ctc, encoder
from .chunking import ContextMode
from .frontend import FRAME_MS, OnlineMVN
from .model import Model, forward_chunks, simulate_batch
from .simu import SimState, gru_encode_chunk, predict_future
from .tensor import Tensor, get_dtype, no_grad


class SessionError(RuntimeError):
    """Invalid use of a streaming session."""


def ms_to_frames(ms: int, name: str = "duration") -> int:
    if ms < 0 or ms % FRAME_MS:
        raise ValueError(f"{name} must be a non-negative multiple of {FRAME_MS} ms, got {ms}")
    return ms // FRAME_MS


@dataclass(frozen=True)
class StreamConfig:
    chunk: int = 40
    left: int = 40
    right: int = 40
    mode: ContextMode = ContextMode.SIMULATED

    @classmethod
    def from_ms(cls, chunk_ms=400, left_ms=400, right_ms=400, mode="sim") -> "StreamConfig":
        mode = mode if isinstance(mode, ContextMode) else ContextMode.parse(mode)
        return cls(ms_to_frames(chunk_ms, "chunk"), ms_to_frames(left_ms, "left context"),
                   ms_to_frames(right_ms, "right context"), mode)

    @property
    def wait_frames(self) -> int:
        """Audio beyond a chunk's start that must arrive before it is emitted."""
        return self.chunk + (self.right if self.mode is ContextMode.REAL else 0)

    def describe(self) -> dict:
        return {"chunk_frames": self.chunk, "left_frames": self.left, "right_frames": self.right,
                "mode": self.mode.value, "chunk_ms": self.chunk * FRAME_MS, "wait_ms": self.wait_frames * FRAME_MS}


@dataclass
class ChunkRecord:
    index: int
    emit_offset: int  # frames received when the chunk was emitted
    wait_frames: int
    compute_ms: float

    @property
    def wait_ms(self) -> int:
        return self.wait_frames * FRAME_MS

    def to_json(self) -> dict:
        return {"chunk": self.index, "emit_offset": self.emit_offset, "wait_ms": self.wait_ms,
                "compute_ms": round(self.compute_ms, 3)}


@dataclass
class LatencyLog:
    chunks: list = field(default_factory=list)

    def summary(self) -> dict:
        waits = [c.wait_ms for c in self.chunks]
        comp = [c.compute_ms for c in self.chunks]
        return {
            "chunks": len(self.chunks),
            "wait_ms": sorted(set(waits)),
            "mean_compute_ms": float(np.mean(comp)) if comp else 0.0,
            "max_compute_ms": float(np.max(comp)) if comp else 0.0,
        }


class StreamingSession:
    """One audio stream; not thread-safe, but sessions share nothing mutable."""

    def __init__(self, model: Model, config: StreamConfig, normalize: bool = True):
        r = model.r
        if config.chunk < 1:
            raise ValueError("chunk size must be positive")
        if config.chunk % r or config.left % r:
            raise ValueError("chunk and left context must be multiples of the subsampling rate")
        if config.mode is not ContextMode.NONE and config.right < 1:
            raise ValueError("right context must be positive unless mode is none")
        if config.mode is ContextMode.SIMULATED and config.right != model.config.simu.n_future:
            raise ValueError("simulated right context must equal the simulator's N")
        self.model = model
        self.config = config
        self.d = model.config.encoder.d_in
        self.mvn = OnlineMVN(self.d) if normalize else None
        self.sim_state = SimState.zeros(model.config.simu, 1, get_dtype())
        self.frames = np.zeros((0, self.d))
        self.next_chunk = 0
        self.emitted = []
        self.latency = LatencyLog()
        self.finalized = False
        self._prev_token = None
        self.tokens = []

    @property
    def received(self) -> int:
        return self.frames.shape[0]

    def feed_frames(self, frames) -> list:
        """Append frames (n, d); return the posterior blocks this completes."""
        if self.finalized:
            raise SessionError("session already finalised")
        frames = np.asarray(frames, dtype=np.float64).reshape(-1, self.d)
        if self.mvn is not None:
            frames = self.mvn(frames)
        self.frames = np.concatenate([self.frames, frames])
        out = []
        c = self.config
        while (self.next_chunk + 1) * c.chunk + (c.right if c.mode is ContextMode.REAL else 0) <= self.received:
            out.append(self._process(final=False))
        return out

    def finalize(self):
        """Flush the trailing (padded) chunks; return (blocks, LatencyLog)."""
        if self.finalized:
            raise SessionError("session already finalised")
        out = []
        while self.next_chunk * self.config.chunk < self.received:
            out.append(self._process(final=True))
        self.finalized = True
        return out, self.latency

    def posteriors(self) -> np.ndarray:
        if not self.emitted:
            return np.zeros((0, self.model.config.encoder.vocab + 1))
        return np.concatenate(self.emitted)

    def _process(self, final: bool) -> np.ndarray:
        t0 = time.perf_counter()
        c, k, n = self.config, self.next_chunk, self.received
        r = self.model.r
        lo, hi = k * c.chunk, (k + 1) * c.chunk
        with no_grad():
            self.sim_state = gru_encode_chunk(self.frames[lo:min(hi, n)].astype(get_dtype()), self.sim_state,
                                              self.model.params)
            right = c.right if c.mode is not ContextMode.NONE else 0
            idx = np.arange(lo - c.left, hi + right)
            valid = (idx >= 0) & (idx < n)
            x = np.zeros((idx.size, self.d), dtype=get_dtype())
            x[valid] = self.frames[idx[valid]]
            if c.mode is ContextMode.SIMULATED:
                x[c.left + c.chunk:] = predict_future(self.sim_state.top, self.model.params).data[0]
                valid[c.left + c.chunk:] = True
            h, _ = encoder.encode(Tensor(x[None]), valid[None], self.model.params, self.model.config.encoder)
            block = encoder.project(encoder.discard_context(h, c.left, c.chunk, r), self.model.params).data[0]
        if final and hi >= n:
            keep = chunking.output_length(n, r) - lo // r
            block = block[:keep]
        self.next_chunk += 1
        self.emitted.append(block)
        self._greedy(block)
        self.latency.chunks.append(ChunkRecord(k, n, c.wait_frames, 1000 * (time.perf_counter() - t0)))
        return block

    def _greedy(self, block):
        for kk in block.argmax(axis=-1):
            kk = int(kk)
            if kk != self._prev_token and kk != ctc.BLANK:
                self.tokens.append(kk)
            self._prev_token = kk

    def hypothesis(self, beam=None) -> list:
        """Greedy tokens so far; prefix beam search over everything when ``beam``."""
        if beam:
            return ctc.prefix_beam_decode(self.posteriors(), beam)
        return list(self.tokens)


def session_new(model: Model, config: StreamConfig) -> StreamingSession:
    return StreamingSession(model, config)


def stream_utterance(model: Model, frames, config: StreamConfig, step: int = 1):
    """Feed ``frames`` ``step`` at a time and finalise; returns the session."""
    s = StreamingSession(model, config)
    for i in range(0, len(frames), step):
        s.feed_frames(frames[i:i + step])
    s.finalize()
    return s


def offline_equivalence(x, model: Model, config: StreamConfig) -> np.ndarray:
    """Same computation through the training (batch) path, for comparison."""
    frames = np.asarray(getattr(x, "frames", x), dtype=np.float64)
    feats = OnlineMVN(frames.shape[1])(frames).astype(get_dtype())
    plan = chunking.plan_chunks(feats.shape[0], config.chunk, config.left, config.right, config.mode)
    with no_grad():
        sim = simulate_batch(model, [feats], config.chunk)[0] if config.mode is ContextMode.SIMULATED else None
        return forward_chunks(model, [feats], [plan], sim)[0].data
