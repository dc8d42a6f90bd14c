import json
import os
import struct

import numpy as np
import pytest

from raqr.errors import CheckpointError
from raqr.storage import MAGIC, read_container, read_manifest, write_container


def test_roundtrip_bit_exact(tmp_path, rng):
    tensors = {"a": rng.standard_normal((3, 4)), "b": np.array([np.pi, -0.0, 1e-310]), "c": np.zeros((0, 2))}
    path = tmp_path / "x.bin"
    write_container(path, {"note": "hi"}, tensors)
    manifest, out = read_container(path)
    assert manifest["note"] == "hi"
    assert list(out) == ["a", "b", "c"]
    for k, v in tensors.items():
        assert out[k].shape == v.shape
        assert out[k].tobytes() == v.astype("<f8").tobytes()


def test_float32_payload(tmp_path, rng):
    a = rng.standard_normal(5)
    write_container(tmp_path / "x.bin", {}, {"a": a}, dtype="<f4")
    _, out = read_container(tmp_path / "x.bin")
    assert out["a"].dtype == np.dtype("<f4")
    np.testing.assert_array_equal(out["a"], a.astype(np.float32))


def test_layout(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, {"z": 1, "a": 2}, {"t": np.arange(3.0)})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    (n,) = struct.unpack("<Q", raw[8:16])
    header = raw[16:16 + n].decode()
    assert header == json.dumps(json.loads(header), sort_keys=True, separators=(",", ":"))
    assert raw[16 + n:] == np.arange(3.0).astype("<f8").tobytes()
    assert read_manifest(path)[1] == 16 + n


def test_no_partial_left(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, {}, {"t": np.ones(2)})
    assert not os.path.exists(str(path) + ".partial")


def test_bad_magic(tmp_path):
    path = tmp_path / "x.bin"
    path.write_bytes(b"NOTRAQR!" + bytes(8))
    with pytest.raises(CheckpointError, match="magic"):
        read_container(path)


def test_truncated(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, {}, {"t": np.ones(10)})
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        read_container(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="cannot read"):
        read_container(tmp_path / "nope.bin")


def test_unwritable_path(tmp_path):
    with pytest.raises(CheckpointError, match="cannot write"):
        write_container(tmp_path / "no_dir" / "x.bin", {}, {"t": np.ones(1)})


def test_bad_dtype(tmp_path):
    with pytest.raises(CheckpointError):
        write_container(tmp_path / "x.bin", {}, {"t": np.ones(1)}, dtype="<f2")
