import struct
import zlib

import numpy as np
import pytest

from robustfuse.autodiff import ParameterStore
from robustfuse.fusion import ArchSpec, FusionRule
from robustfuse.io import MAGIC, CheckpointError, decode_tensors, encode_tensors, load_checkpoint, \
    save_checkpoint, store_digest
from robustfuse.model import Composite


def test_round_trip_is_byte_identical(tmp_path):
    store = Composite.from_arch(ArchSpec.uniform("3-DB", FusionRule("AA"), 4), seg_width=4).init(3)
    save_checkpoint(tmp_path / "a.ckpt", store, {"note": "x"})
    loaded, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert loaded.equals(store) and meta["note"] == "x" and meta["seed"] == 3
    save_checkpoint(tmp_path / "b.ckpt", loaded, {"note": "x"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert store_digest(loaded) == store_digest(store)


def test_layout_is_sorted_little_endian_float32():
    blob = encode_tensors({"b": np.array([1.0, 2.0]), "a": np.array([[3.0]])})
    assert blob[:8] == MAGIC
    (hlen,) = struct.unpack("<Q", blob[8:16])
    payload = blob[16 + hlen:]
    np.testing.assert_array_equal(np.frombuffer(payload, "<f4"), [3.0, 1.0, 2.0])
    import json
    header = json.loads(blob[16:16 + hlen])
    assert header["crc32"] == zlib.crc32(payload)
    assert [e["name"] for e in header["tensors"]] == ["a", "b"]


def test_corruption_is_detected():
    blob = bytearray(encode_tensors({"w": np.arange(4.0)}))
    blob[-1] ^= 0xFF
    with pytest.raises(CheckpointError):
        decode_tensors(bytes(blob))
    with pytest.raises(CheckpointError):
        decode_tensors(b"NOTACKPT" + bytes(blob[8:]))


def test_architecture_mismatch_is_rejected():
    a = Composite.from_arch(ArchSpec.uniform("3-DC", FusionRule("AA"), 4), seg_width=4)
    b = Composite.from_arch(ArchSpec.uniform("3-DB", FusionRule("AA"), 4), seg_width=4)
    with pytest.raises(ValueError):
        b.check_params(a.init(0))
    s = a.init(0)
    s["fuse.head.w"] = np.zeros((1, 1, 1, 1), np.float32)
    with pytest.raises(ValueError):
        a.check_params(s)
    a.check_params(a.init(0))
    assert isinstance(a.init(0), ParameterStore)
