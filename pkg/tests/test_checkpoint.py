from __future__ import annotations

import os

import numpy as np
import pytest

from hypertype import checkpoint
from hypertype.autodiff import Parameter
from hypertype.checkpoint import CheckpointError


def sample():
    params = {
        "w": Parameter("w", np.arange(6.0).reshape(2, 3)),
        "p": Parameter("p", np.array([[0.1, -0.2]]), "poincare"),
        "beta": Parameter("beta", np.array(1.5)),
    }
    return params, {"adam_m": {"w": np.ones((2, 3))}}, {"note": "x", "n": 3}


def test_round_trip_preserves_values_shapes_and_tags(tmp_path):
    params, extra, meta = sample()
    checkpoint.save(tmp_path / "a.ckpt", params, meta, extra)
    back, groups, meta2 = checkpoint.load(tmp_path / "a.ckpt")
    assert meta2 == meta
    for name, p in params.items():
        assert back[name].manifold == p.manifold
        assert back[name].value.shape == p.value.shape
        np.testing.assert_array_equal(back[name].value, p.value)
    np.testing.assert_array_equal(groups["adam_m"]["w"], extra["adam_m"]["w"])


def test_layout_header(tmp_path):
    params, extra, meta = sample()
    checkpoint.save(tmp_path / "a.ckpt", params, meta, extra)
    data = (tmp_path / "a.ckpt").read_bytes()
    assert data[:8] == checkpoint.MAGIC
    assert int.from_bytes(data[8:12], "little") == checkpoint.VERSION


def test_every_truncation_is_rejected(tmp_path):
    params, extra, meta = sample()
    data = checkpoint.encode({"param": {n: p.value for n, p in params.items()}}, {}, meta)
    for cut in range(0, len(data), 7):
        with pytest.raises(CheckpointError):
            checkpoint.decode(data[:cut])


def test_bit_flips_are_rejected():
    params, _, meta = sample()
    data = bytearray(checkpoint.encode({"param": {n: p.value for n, p in params.items()}}, {}, meta))
    for pos in (0, 10, 30, len(data) // 2, len(data) - 40, len(data) - 1):
        bad = bytearray(data)
        bad[pos] ^= 0x01
        with pytest.raises(CheckpointError):
            checkpoint.decode(bytes(bad))


def test_missing_file_is_a_checkpoint_error(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "none.ckpt")


def test_failed_write_leaves_old_file_and_no_temp(tmp_path, monkeypatch):
    target = tmp_path / "a.ckpt"
    checkpoint.atomic_write_bytes(target, b"old")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        checkpoint.atomic_write_bytes(target, b"new contents")
    assert target.read_bytes() == b"old"
    assert sorted(p.name for p in tmp_path.iterdir()) == ["a.ckpt"]


def test_atomic_write_creates_parent(tmp_path):
    checkpoint.atomic_write_text(tmp_path / "x" / "y.txt", "hi")
    assert (tmp_path / "x" / "y.txt").read_text() == "hi"
