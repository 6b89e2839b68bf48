import struct

import numpy as np
import pytest

from chunksim import io


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a": rng.normal(size=(3, 4)), "b.c": rng.normal(size=(5,)), "s": np.array(2.5)}
    io.save_checkpoint(tmp_path / "m.ckpt", tensors)
    back = io.load_checkpoint(tmp_path / "m.ckpt")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert np.array_equal(back[k], tensors[k].astype(np.float32))


def test_checkpoint_layout(tmp_path):
    io.save_checkpoint(tmp_path / "m.ckpt", {"w": np.array([[1.0, 2.0]])})
    raw = (tmp_path / "m.ckpt").read_bytes()
    expected = (b"CHKSIMPT" + struct.pack("<IQ", 1, 1) + struct.pack("<I", 1) + b"w"
                + struct.pack("<I", 2) + struct.pack("<QQ", 1, 2) + struct.pack("<ff", 1.0, 2.0))
    assert raw == expected


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
def test_checkpoint_corruption_detected(tmp_path, damage):
    p = tmp_path / "m.ckpt"
    io.save_checkpoint(p, {"w": np.ones((2, 2))})
    raw = bytearray(p.read_bytes())
    if damage == "magic":
        raw[0:1] = b"X"
    elif damage == "truncate":
        raw = raw[:-3]
    elif damage == "trailing":
        raw += b"\0"
    else:
        raw[8:12] = struct.pack("<I", 99)
    p.write_bytes(bytes(raw))
    with pytest.raises(io.FormatError):
        io.load_checkpoint(p)


def test_features_round_trip(tmp_path, rng):
    x = rng.normal(size=(17, 5)).astype(np.float32)
    io.save_features(tmp_path / "f.feat", x)
    assert np.array_equal(io.load_features(tmp_path / "f.feat"), x)
    with pytest.raises(io.FormatError):
        io.save_features(tmp_path / "g.feat", np.zeros(3))


def test_manifest_round_trip(tmp_path):
    (tmp_path / "feats").mkdir()
    entries = [io.ManifestEntry("u1", tmp_path / "feats" / "u1.feat", [1, 2, 3]),
               io.ManifestEntry("u2", tmp_path / "feats" / "u2.feat", [4])]
    io.write_manifest(tmp_path / "train.manifest", entries)
    assert (tmp_path / "train.manifest").read_text().splitlines()[0] == "u1 feats/u1.feat 1 2 3"
    assert io.read_manifest(tmp_path / "train.manifest") == entries


@pytest.mark.parametrize("line", ["u1 feats/u1.feat", "u1 feats/u1.feat a b"])
def test_bad_manifest_lines(tmp_path, line):
    (tmp_path / "m").write_text(line + "\n")
    with pytest.raises(io.FormatError):
        io.read_manifest(tmp_path / "m")
