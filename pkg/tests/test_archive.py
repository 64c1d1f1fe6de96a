import struct

import numpy as np
import pytest

from ltd.archive import MAGIC, read_archive, read_header, write_archive
from ltd.backbone import BackboneConfig, init_random_backbone, load_weight_archive, save_backbone
from ltd.errors import (BadMagicError, MissingTensorError, NonFiniteWeightError, ShapeMismatchError,
                        TruncatedArchiveError)


def test_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "b": np.arange(5, dtype=np.float32)}
    path = tmp_path / "w.ltdw"
    write_archive(path, tensors, note="hello")
    header, back = read_archive(path)
    assert header["note"] == "hello"
    for k, v in tensors.items():
        assert back[k].tobytes() == v.tobytes()


def test_layout(tmp_path):
    path = tmp_path / "w.ltdw"
    write_archive(path, {"x": np.array([1.5], np.float32)})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[8:16])
    assert raw[16 + hlen:] == struct.pack("<f", 1.5)
    assert read_header(path)["tensors"]["x"]["shape"] == [1]


def test_bad_magic(tmp_path):
    path = tmp_path / "w.ltdw"
    path.write_bytes(b"NOTMAGIC" + b"\0" * 16)
    with pytest.raises(BadMagicError):
        read_archive(path)


@pytest.mark.parametrize("cut", [4, 12, 20, -2])
def test_truncation(tmp_path, cut):
    path = tmp_path / "w.ltdw"
    write_archive(path, {"x": np.ones(4, np.float32)})
    raw = path.read_bytes()
    path.write_bytes(raw[:cut])
    with pytest.raises(TruncatedArchiveError):
        read_archive(path)


def test_non_finite_weight_is_named(tmp_path):
    path = tmp_path / "w.ltdw"
    write_archive(path, {"good": np.ones(2, np.float32), "bad": np.array([1.0, np.inf], np.float32)})
    with pytest.raises(NonFiniteWeightError, match="bad"):
        read_archive(path)


def test_backbone_missing_and_misshapen_tensors(tmp_path):
    w = init_random_backbone(BackboneConfig.toy(), 0)
    path = tmp_path / "bb.ltdw"
    tensors = dict(w.tensors)
    del tensors["blocks.3.mlp.fc1.bias"]
    write_archive(path, tensors, kind="backbone", config=w.config.to_dict(), norm=w.norm)
    with pytest.raises(MissingTensorError, match="blocks.3.mlp.fc1.bias"):
        load_weight_archive(path)
    tensors = dict(w.tensors)
    tensors["cls_token"] = np.zeros(31, np.float32)
    write_archive(path, tensors, kind="backbone", config=w.config.to_dict(), norm=w.norm)
    with pytest.raises(ShapeMismatchError):
        load_weight_archive(path)


def test_backbone_round_trip(tmp_path):
    w = init_random_backbone(BackboneConfig.toy(), 3)
    path = tmp_path / "bb.ltdw"
    save_backbone(path, w)
    cfg, back = load_weight_archive(path)
    assert cfg == w.config
    assert back.content_hash() == w.content_hash()
