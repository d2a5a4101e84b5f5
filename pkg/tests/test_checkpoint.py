from __future__ import annotations

import struct

import numpy as np
import pytest

from dbf import checkpoint
from dbf.errors import SchemaError


@pytest.fixture
def payload(rng):
    tensors = {"b.w": rng.normal(size=(3, 2)), "a.bias": rng.normal(size=4), "s": np.array(2.5)}
    return tensors, {"config": {"alpha": 0.1}, "best_epoch": 3}


def test_round_trip_is_exact(tmp_path, payload):
    tensors, manifest = payload
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, tensors, manifest)
    back, meta = checkpoint.load(path)
    assert meta == manifest
    assert sorted(back) == sorted(tensors)
    for k, v in tensors.items():
        assert back[k].shape == v.shape and back[k].tobytes() == v.tobytes()
    assert not (tmp_path / "x.ckpt.tmp").exists()


def test_encoding_ignores_insertion_order(payload):
    tensors, manifest = payload
    reordered = dict(reversed(list(tensors.items())))
    assert checkpoint.encode(tensors, manifest) == checkpoint.encode(reordered, dict(reversed(list(manifest.items()))))


def test_layout_header(payload):
    blob = checkpoint.encode(*payload)
    assert blob[:8] == b"DBFCKPT\x00"
    assert struct.unpack("<I", blob[8:12]) == (1,)


def test_bad_magic(payload):
    blob = bytearray(checkpoint.encode(*payload))
    blob[0] ^= 0xFF
    with pytest.raises(SchemaError, match="magic"):
        checkpoint.decode(bytes(blob))


def test_unknown_version(payload):
    blob = bytearray(checkpoint.encode(*payload))
    blob[8:12] = struct.pack("<I", 7)
    with pytest.raises(SchemaError, match="version 7"):
        checkpoint.decode(bytes(blob))


@pytest.mark.parametrize("cut", [1, 8, 100])
def test_truncation_detected(payload, cut):
    blob = checkpoint.encode(*payload)
    with pytest.raises(SchemaError, match="truncated"):
        checkpoint.decode(blob[:-cut])


def test_trailing_bytes_detected(payload):
    with pytest.raises(SchemaError, match="trailing"):
        checkpoint.decode(checkpoint.encode(*payload) + b"\x00")
