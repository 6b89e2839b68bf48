"""Context-sensitive chunking and reassembly.

An utterance of ``T`` frames is cut into ``K = ceil(T / c)`` non-overlapping
chunks (the last one zero-padded).  Each chunk is spliced with ``left``
history frames and ``N`` right-context frames, which are real, absent, or
simulated depending on the :class:`ContextMode`.  Positions that fall outside
the utterance are zero and flagged invalid so the encoder can ignore them.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, concat


class ContextMode(enum.Enum):
    REAL = "real"
    NONE = "none"
    SIMULATED = "sim"

    @classmethod
    def parse(cls, text: str) -> "ContextMode":
        aliases = {"real": cls.REAL, "none": cls.NONE, "sim": cls.SIMULATED, "simulated": cls.SIMULATED}
        try:
            return aliases[text.strip().lower()]
        except KeyError:
            raise ValueError(f"unknown context mode {text!r}") from None


@dataclass(frozen=True)
class ChunkPlan:
    T: int
    chunk_size: int
    left: int
    right: int
    mode: ContextMode

    @property
    def K(self) -> int:
        return math.ceil(self.T / self.chunk_size)

    @property
    def pad(self) -> int:
        return self.K * self.chunk_size - self.T

    @property
    def right_frames(self) -> int:
        """Right-context frames actually spliced (0 in mode NONE)."""
        return 0 if self.mode is ContextMode.NONE else self.right

    @property
    def splice_len(self) -> int:
        return self.left + self.chunk_size + self.right_frames

    def center(self, k: int) -> tuple[int, int]:
        return k * self.chunk_size, (k + 1) * self.chunk_size


@dataclass
class ContextSensitiveChunk:
    frames: np.ndarray  # (left + chunk + N, d)
    index: int
    valid: np.ndarray  # (left + chunk + N,) bool
    is_context: np.ndarray  # (left + chunk + N,) bool


def plan_chunks(T: int, chunk_size: int, left: int = 0, right: int = 0, mode=ContextMode.NONE) -> ChunkPlan:
    if T < 1:
        raise ValueError("T must be >= 1")
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    if left < 0 or right < 0:
        raise ValueError("context sizes must be non-negative")
    if mode is not ContextMode.NONE and right < 1:
        raise ValueError(f"mode {mode.value} needs a positive right context")
    return ChunkPlan(T, chunk_size, left, right, mode)


def splice_index(plan: ChunkPlan) -> np.ndarray:
    """Utterance frame index of every splice position, shape (K, splice_len).

    Right-context positions are included for REAL and SIMULATED; in
    SIMULATED mode they do not refer to utterance frames and callers replace
    them.
    """
    offsets = np.arange(-plan.left, plan.chunk_size + plan.right_frames)
    return np.arange(plan.K)[:, None] * plan.chunk_size + offsets[None, :]


def splice_validity(plan: ChunkPlan) -> np.ndarray:
    idx = splice_index(plan)
    valid = (idx >= 0) & (idx < plan.T)
    if plan.mode is ContextMode.SIMULATED:
        valid[:, plan.left + plan.chunk_size:] = True
    return valid


def _check_sim(sim_ctx, plan, d):
    if plan.mode is not ContextMode.SIMULATED:
        return
    if sim_ctx is None:
        raise ValueError("simulated mode needs simulated context frames")
    if tuple(sim_ctx.shape) != (plan.K, plan.right, d):
        raise ValueError(f"simulated context has shape {tuple(sim_ctx.shape)}, expected {(plan.K, plan.right, d)}")


def real_part(frames: np.ndarray, plan: ChunkPlan) -> np.ndarray:
    """Splice of utterance frames only (zeros outside), shape (K, L, d).

    In SIMULATED mode the right context is excluded.
    """
    idx = splice_index(plan)
    if plan.mode is ContextMode.SIMULATED:
        idx = idx[:, : plan.left + plan.chunk_size]
    ok = (idx >= 0) & (idx < plan.T)
    out = np.zeros(idx.shape + (frames.shape[1],), dtype=frames.dtype)
    out[ok] = frames[idx[ok]]
    return out


def format_chunk(x, sim_ctx, plan: ChunkPlan) -> list[ContextSensitiveChunk]:
    """Build the K context-sensitive chunks of an utterance (numpy)."""
    frames = np.asarray(getattr(x, "frames", x))
    if frames.shape[0] != plan.T:
        raise ValueError(f"plan covers {plan.T} frames, features have {frames.shape[0]}")
    _check_sim(sim_ctx, plan, frames.shape[1])
    spliced = real_part(frames, plan)
    if plan.mode is ContextMode.SIMULATED:
        spliced = np.concatenate([spliced, np.asarray(sim_ctx, dtype=spliced.dtype)], axis=1)
    valid = splice_validity(plan)
    is_ctx = np.ones(plan.splice_len, dtype=bool)
    is_ctx[plan.left:plan.left + plan.chunk_size] = False
    return [ContextSensitiveChunk(spliced[k], k, valid[k], is_ctx.copy()) for k in range(plan.K)]


def chunk_tensor(frames: np.ndarray, plan: ChunkPlan, sim_ctx: Tensor | None = None):
    """Differentiable splice: (Tensor (K, L, d), valid (K, L)).

    Gradients flow into ``sim_ctx`` when it is a Tensor.
    """
    _check_sim(sim_ctx, plan, frames.shape[1])
    base = Tensor(real_part(frames, plan))
    if plan.mode is ContextMode.SIMULATED:
        sim = sim_ctx if isinstance(sim_ctx, Tensor) else Tensor(sim_ctx)
        base = concat([base, sim], axis=1)
    return base, splice_validity(plan)


def output_length(T: int, r: int) -> int:
    return -(-T // r)


def format_utt(chunk_outputs, plan: ChunkPlan, r: int = 1):
    """Concatenate K center-output blocks and trim to ``ceil(T / r)`` rows.

    ``chunk_outputs`` is an array/Tensor of shape (K, chunk/r, V) or a list of
    K blocks.
    """
    if isinstance(chunk_outputs, (list, tuple)):
        if len(chunk_outputs) != plan.K:
            raise ValueError(f"got {len(chunk_outputs)} blocks for {plan.K} chunks")
        if chunk_outputs and isinstance(chunk_outputs[0], Tensor):
            from .tensor import stack

            chunk_outputs = stack(chunk_outputs)
        else:
            chunk_outputs = np.stack(chunk_outputs)
    if chunk_outputs.shape[0] != plan.K:
        raise ValueError(f"got {chunk_outputs.shape[0]} blocks for {plan.K} chunks")
    if plan.chunk_size % r:
        raise ValueError("chunk size must be a multiple of the subsampling rate")
    rows = plan.chunk_size // r
    flat = chunk_outputs.reshape((plan.K * rows,) + tuple(chunk_outputs.shape[2:]))
    return flat[: output_length(plan.T, r)]


def sample_chunk_size(C: int, A: int, rng, multiple: int = 1) -> int:
    """Uniform integer draw from [C - A, C + A] (restricted to multiples)."""
    if not 0 <= A < C:
        raise ValueError(f"need 0 <= A < C, got C={C}, A={A}")
    choices = np.arange(C - A, C + A + 1)
    choices = choices[choices % multiple == 0]
    if choices.size == 0:
        raise ValueError(f"no multiple of {multiple} in [{C - A}, {C + A}]")
    return int(choices[rng.integers(choices.size)])


_MODE_ORDER = (ContextMode.REAL, ContextMode.NONE, ContextMode.SIMULATED)


def sample_context_mode(rng, allowed) -> ContextMode:
    allowed = {m if isinstance(m, ContextMode) else ContextMode.parse(m) for m in allowed}
    options = [m for m in _MODE_ORDER if m in allowed]
    if not options:
        raise ValueError("no context modes allowed")
    return options[int(rng.integers(len(options)))]
