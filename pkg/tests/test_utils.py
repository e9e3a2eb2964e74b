"""Tests for src/utils.py — payload arrays, region copies, atomic JSON."""

from __future__ import annotations

import json

import numpy as np
import pytest

from src.errors import PayloadSizeError
from src.model import DatasetDecl, Region
from src.utils import copy_region, extract, payload_array, write_json_atomic


class TestPayloadArray:
    def test_bytes_reshaped(self, decl_2d):
        region = Region((0, 0), (2, 3))
        raw = np.arange(6, dtype="<f4").tobytes()
        arr = payload_array(raw, decl_2d, region)
        assert arr.shape == (2, 3)
        assert arr[1, 2] == 5.0

    def test_array_flattened_input(self, decl_2d):
        region = Region((0, 0), (2, 3))
        arr = payload_array(np.arange(6, dtype="<f4"), decl_2d, region)
        assert arr.shape == (2, 3)

    def test_wrong_byte_count(self, decl_2d):
        with pytest.raises(PayloadSizeError, match="needs 24"):
            payload_array(b"\x00" * 20, decl_2d, Region((0, 0), (2, 3)))

    def test_wrong_element_count(self, decl_2d):
        with pytest.raises(PayloadSizeError, match="elements"):
            payload_array(np.zeros(5, dtype="<f4"), decl_2d, Region((0, 0), (2, 3)))

    def test_wrong_dtype(self, decl_2d):
        with pytest.raises(PayloadSizeError, match="float64"):
            payload_array(np.zeros(6), decl_2d, Region((0, 0), (2, 3)))


class TestRegionCopies:
    def test_copy_region(self):
        dst_region = Region((10,), (6,))
        src_region = Region((12,), (4,))
        dst = np.zeros(6)
        src = np.array([1.0, 2.0, 3.0, 4.0])
        copy_region(dst, dst_region, src, src_region, Region((13,), (2,)))
        assert dst.tolist() == [0, 0, 0, 2, 3, 0]

    def test_extract_is_c_order(self):
        decl = DatasetDecl("m", "i4", (4, 4))
        src_region = Region((0, 0), (4, 4))
        src = np.arange(16, dtype="<i4").reshape(4, 4)
        raw = extract(src, src_region, Region((1, 1), (2, 2)))
        assert np.frombuffer(raw, dtype=decl.dtype).tolist() == [5, 6, 9, 10]


class TestWriteJsonAtomic:
    def test_creates_parent_and_writes(self, tmp_path):
        path = tmp_path / "nested" / "doc.json"
        write_json_atomic(path, {"b": 1, "a": [1, 2]})
        assert json.loads(path.read_text()) == {"a": [1, 2], "b": 1}
        assert [p.name for p in path.parent.iterdir()] == ["doc.json"]

    def test_replaces_existing(self, tmp_path):
        path = tmp_path / "doc.json"
        path.write_text("old")
        write_json_atomic(path, {"v": 2})
        assert json.loads(path.read_text()) == {"v": 2}

    def test_failure_leaves_no_temp_file(self, tmp_path, mocker):
        mocker.patch("src.utils.json.dump", side_effect=OSError("disk full"))
        path = tmp_path / "doc.json"
        with pytest.raises(OSError, match="disk full"):
            write_json_atomic(path, {"v": 1})
        assert list(tmp_path.iterdir()) == []
