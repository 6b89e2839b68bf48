"""Binary file formats: parameter checkpoints, feature files, manifests.

All integers and floats are little-endian.  Checkpoints and feature files
store 32-bit floats; reading and re-writing either is bit-exact.

Checkpoint layout::

    b"CHKSIMPT" | u32 version | u64 count
    count x ( u32 name_len | name (utf-8) | u32 rank | rank x u64 extent | f32 data )

Feature file layout::

    b"CHKSIMFT" | u32 version | u64 T | u64 d | T*d f32 (row-major)

Manifest: one utterance per line, ``<id> <feature path> <tok> <tok> ...``;
relative paths resolve against the manifest's directory.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"CHKSIMPT"
FEAT_MAGIC = b"CHKSIMFT"
VERSION = 1


class FormatError(ValueError):
    """Malformed or unsupported file."""


def _read_exact(f, n):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("unexpected end of file")
    return buf


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays (converted to float32) in checkpoint format."""
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(tensors)))
        for name, arr in tensors.items():
            arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if _read_exact(f, len(CKPT_MAGIC)) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint")
        version, count = struct.unpack("<IQ", _read_exact(f, 12))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4))
            shape = struct.unpack(f"<{rank}Q", _read_exact(f, 8 * rank))
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(_read_exact(f, 4 * size), dtype="<f4").reshape(shape)
            out[name] = data.astype(np.float32)
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return out


def save_features(path, frames) -> None:
    frames = np.asarray(frames, dtype="<f4")
    if frames.ndim != 2:
        raise FormatError("features must be a T x d matrix")
    with open(path, "wb") as f:
        f.write(FEAT_MAGIC)
        f.write(struct.pack("<IQQ", VERSION, *frames.shape))
        f.write(np.ascontiguousarray(frames).tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_exact(f, len(FEAT_MAGIC)) != FEAT_MAGIC:
            raise FormatError(f"{path}: not a feature file")
        version, T, d = struct.unpack("<IQQ", _read_exact(f, 20))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        data = np.frombuffer(_read_exact(f, 4 * T * d), dtype="<f4").reshape(T, d)
    return data.astype(np.float32)


@dataclass
class ManifestEntry:
    utt_id: str
    path: Path
    label: list[int]


def write_manifest(path, entries) -> None:
    path = Path(path)
    with open(path, "w") as f:
        for e in entries:
            p = Path(e.path)
            try:
                p = p.relative_to(path.parent)
            except ValueError:
                pass
            f.write(f"{e.utt_id} {p.as_posix()} {' '.join(map(str, e.label))}\n")


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise FormatError(f"{path}:{lineno}: expected id, path and at least one token")
            feat = Path(parts[1])
            if not feat.is_absolute():
                feat = path.parent / feat
            try:
                label = [int(t) for t in parts[2:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: tokens must be integers") from None
            entries.append(ManifestEntry(parts[0], feat, label))
    return entries
