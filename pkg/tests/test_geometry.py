"""Tests for src/geometry.py — hyperslab algebra.

2-D intersections are checked against shapely boxes, higher ranks against a
brute-force cell count.
"""

from __future__ import annotations

import numpy as np
import pytest
from shapely.geometry import box

from src.geometry import (
    cells,
    contains,
    intersect,
    partition_axis,
    relative_slices,
    slice_to_cap,
)
from src.model import Region, volume


def _random_region(rng: np.random.Generator, rank: int, bound: int = 12) -> Region:
    offset = tuple(int(v) for v in rng.integers(0, bound, size=rank))
    extent = tuple(int(v) for v in rng.integers(1, bound, size=rank))
    return Region(offset, extent)


def _as_box(r: Region):
    # axis 0 is y, axis 1 is x
    return box(r.offset[1], r.offset[0], r.stop[1], r.stop[0])


class TestIntersect:
    def test_overlap(self):
        a = Region((0, 0), (4, 4))
        b = Region((2, 1), (5, 2))
        assert intersect(a, b) == Region((2, 1), (2, 2))

    def test_touching_is_disjoint(self):
        assert intersect(Region((0,), (5,)), Region((5,), (3,))) is None

    def test_disjoint_on_one_axis(self):
        assert intersect(Region((0, 0), (4, 4)), Region((1, 10), (2, 2))) is None

    def test_commutative(self):
        a = Region((1, 2, 3), (4, 4, 4))
        b = Region((3, 0, 5), (4, 4, 4))
        assert intersect(a, b) == intersect(b, a)

    def test_rank_mismatch(self):
        with pytest.raises(ValueError, match="rank"):
            intersect(Region((0,), (1,)), Region((0, 0), (1, 1)))

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_shapely_2d(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(200):
            a, b = _random_region(rng, 2), _random_region(rng, 2)
            expected = _as_box(a).intersection(_as_box(b))
            got = intersect(a, b)
            if expected.area == 0:
                assert got is None
            else:
                assert got is not None
                assert volume(got) == pytest.approx(expected.area)
                assert _as_box(got).equals(expected)

    @pytest.mark.slow
    def test_matches_cell_count_3d(self):
        rng = np.random.default_rng(1234)
        for _ in range(10_000):
            a, b = _random_region(rng, 3, bound=6), _random_region(rng, 3, bound=6)
            shared = set(cells(a)) & set(cells(b))
            got = intersect(a, b)
            if not shared:
                assert got is None
            else:
                assert got is not None
                assert set(cells(got)) == shared


class TestContains:
    def test_inner(self):
        assert contains(Region((0, 0), (4, 4)), Region((1, 1), (3, 3)))

    def test_self(self):
        r = Region((2,), (3,))
        assert contains(r, r)

    def test_sticks_out(self):
        assert not contains(Region((0, 0), (4, 4)), Region((1, 1), (3, 4)))


class TestPartitionAxis:
    def test_uneven_split_larger_first(self):
        parts = partition_axis((10,), 3)
        assert [p.extent[0] for p in parts if p] == [4, 3, 3]
        assert [p.offset[0] for p in parts if p] == [0, 4, 7]

    def test_other_axis_spans_whole_extent(self):
        parts = partition_axis((6, 8), 2, axis=1)
        assert parts == [Region((0, 0), (6, 4)), Region((0, 4), (6, 4))]

    def test_more_parts_than_cells(self):
        parts = partition_axis((2, 5), 4)
        assert parts[2] is None and parts[3] is None
        assert sum(volume(p) for p in parts if p) == 10

    @pytest.mark.slow
    def test_matches_array_split(self):
        rng = np.random.default_rng(11)
        for _ in range(10_000):
            rank = int(rng.integers(1, 4))
            extent = tuple(int(v) for v in rng.integers(1, 20, size=rank))
            axis = int(rng.integers(0, rank))
            n = int(rng.integers(1, 24))
            parts = partition_axis(extent, n, axis)
            pieces = np.array_split(np.arange(extent[axis]), n)
            assert len(parts) == len(pieces) == n
            for part, piece in zip(parts, pieces, strict=True):
                if piece.size == 0:
                    assert part is None
                    continue
                assert part is not None
                assert part.offset[axis] == piece[0]
                assert part.extent[axis] == piece.size
                others = [a for a in range(rank) if a != axis]
                assert all(part.offset[a] == 0 for a in others)
                assert all(part.extent[a] == extent[a] for a in others)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            partition_axis((4,), 0)
        with pytest.raises(ValueError, match="axis"):
            partition_axis((4,), 2, axis=1)


class TestSliceToCap:
    def test_small_region_unchanged(self):
        r = Region((3,), (5,))
        assert slice_to_cap(r, 5) == [r]

    def test_groups_whole_planes(self):
        pieces = slice_to_cap(Region((0, 0), (6, 4)), 8)
        assert pieces == [
            Region((0, 0), (2, 4)),
            Region((2, 0), (2, 4)),
            Region((4, 0), (2, 4)),
        ]

    def test_descends_when_plane_too_large(self):
        pieces = slice_to_cap(Region((1, 0), (2, 10)), 4)
        assert all(p.extent[0] == 1 and volume(p) <= 4 for p in pieces)
        assert sum(volume(p) for p in pieces) == 20

    @pytest.mark.parametrize("seed", range(5))
    def test_tiles_within_bounds(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            r = _random_region(rng, 3, bound=7)
            cap = int(rng.integers(1, 40))
            pieces = slice_to_cap(r, cap)
            assert all(volume(p) <= cap and contains(r, p) for p in pieces)
            assert sum(volume(p) for p in pieces) == volume(r)
            assert len(pieces) <= 2 * -(-volume(r) // cap)
            covered = [c for p in pieces for c in cells(p)]
            assert len(set(covered)) == len(covered) == volume(r)

    @pytest.mark.slow
    def test_tiles_within_bounds_sweep(self):
        rng = np.random.default_rng(12)
        for _ in range(10_000):
            r = _random_region(rng, int(rng.integers(1, 4)), bound=7)
            cap = int(rng.integers(1, 60))
            pieces = slice_to_cap(r, cap)
            assert all(volume(p) <= cap and contains(r, p) for p in pieces)
            assert len(pieces) <= 2 * -(-volume(r) // cap)
            covered = [c for p in pieces for c in cells(p)]
            assert len(covered) == volume(r)
            assert set(covered) == set(cells(r))

    def test_invalid_cap(self):
        with pytest.raises(ValueError):
            slice_to_cap(Region((0,), (4,)), 0)


class TestRelativeSlices:
    def test_indexes_inner_cells(self):
        outer = Region((10, 20), (4, 5))
        inner = Region((11, 22), (2, 2))
        arr = np.arange(20).reshape(4, 5)
        assert arr[relative_slices(outer, inner)].tolist() == [[7, 8], [12, 13]]

    def test_not_inside(self):
        with pytest.raises(ValueError, match="not inside"):
            relative_slices(Region((0,), (4,)), Region((2,), (4,)))


class TestCells:
    def test_c_order(self):
        assert list(cells(Region((1, 0), (2, 2)))) == [(1, 0), (1, 1), (2, 0), (2, 1)]
