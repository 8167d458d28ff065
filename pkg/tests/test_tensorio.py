import json

import numpy as np
import pytest

from lodgarment import tensorio


def test_round_trip_preserves_values_and_dtypes(tmp_path, rng):
    tensors = {"a": rng.normal(size=(4, 3, 2)), "idx": np.arange(12).reshape(3, 4),
               "scalar": np.array(2.5), "empty": np.zeros((0, 3))}
    tensorio.save(tmp_path / "t.json", {"kind": "x", "n": 3}, tensors)
    header, back = tensorio.load(tmp_path / "t.json")
    assert header == {"kind": "x", "n": 3}
    for k, v in tensors.items():
        assert back[k].shape == v.shape
        assert np.array_equal(back[k], v)
    assert back["idx"].dtype.kind == "i" and back["a"].dtype.kind == "f"


def test_layout_is_little_endian_row_major(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    tensorio.save(tmp_path / "t.json", {}, {"a": a, "b": np.array([7])})
    raw = (tmp_path / "t.json.bin").read_bytes()
    assert raw[:32] == np.array([1.0, 2.0, 3.0, 4.0], dtype="<f8").tobytes()
    assert raw[32:] == np.array([7], dtype="<i8").tobytes()
    doc = json.loads((tmp_path / "t.json").read_text())
    assert [e["offset"] for e in doc["tensors"]] == [0, 32]


def test_truncated_blob_rejected(tmp_path):
    tensorio.save(tmp_path / "t.json", {}, {"a": np.ones(4)})
    p = tmp_path / "t.json.bin"
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(ValueError, match="bytes"):
        tensorio.load(tmp_path / "t.json")
