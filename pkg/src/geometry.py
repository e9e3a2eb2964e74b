"""n-dimensional hyperslab algebra on half-open regions."""

from __future__ import annotations

import itertools
import math
from typing import TYPE_CHECKING

from .model import Region, volume

if TYPE_CHECKING:
    from collections.abc import Iterator

    from .types import Extent, Index


def _check_rank(a: Region, b: Region) -> None:
    if a.rank != b.rank:
        msg = f"rank mismatch: {a.rank} vs {b.rank}"
        raise ValueError(msg)


def intersect(a: Region, b: Region) -> Region | None:
    """Maximal region contained in both ``a`` and ``b``.

    Args:
        a: First region.
        b: Second region, same rank as ``a``.

    Returns:
        The intersection, or ``None`` when the overlap is empty on any axis
        (touching intervals are disjoint).

    Raises:
        ValueError: ``a`` and ``b`` differ in rank.
    """
    _check_rank(a, b)
    lo = tuple(max(x, y) for x, y in zip(a.offset, b.offset, strict=True))
    hi = tuple(min(x, y) for x, y in zip(a.stop, b.stop, strict=True))
    if any(h <= low for low, h in zip(lo, hi, strict=True)):
        return None
    return Region(offset=lo, extent=tuple(h - low for low, h in zip(lo, hi, strict=True)))


def contains(outer: Region, inner: Region) -> bool:
    """True if every cell of ``inner`` lies in ``outer``."""
    _check_rank(outer, inner)
    return all(
        o <= i and i_stop <= o_stop
        for o, i, o_stop, i_stop in zip(
            outer.offset, inner.offset, outer.stop, inner.stop, strict=True
        )
    )


def partition_axis(global_extent: Extent, n_parts: int, axis: int = 0) -> list[Region | None]:
    """Tile a dataset into ``n_parts`` contiguous slabs along ``axis``.

    Lengths along ``axis`` differ by at most one, larger parts first. When
    ``n_parts`` exceeds the extent along ``axis``, the surplus trailing parts
    are ``None``.

    Args:
        global_extent: Extent of the dataset.
        n_parts: Number of slabs, at least 1.
        axis: Axis to cut along; 0 is the slowest-varying axis.

    Returns:
        A list of exactly ``n_parts`` entries.
    """
    if n_parts < 1:
        msg = f"n_parts must be >= 1, got {n_parts}"
        raise ValueError(msg)
    if not 0 <= axis < len(global_extent):
        msg = f"axis {axis} out of range for rank {len(global_extent)}"
        raise ValueError(msg)

    length = global_extent[axis]
    base, extra = divmod(length, n_parts)
    parts: list[Region | None] = []
    start = 0
    for i in range(n_parts):
        size = base + (1 if i < extra else 0)
        if size == 0:
            parts.append(None)
            continue
        offset = tuple(start if a == axis else 0 for a in range(len(global_extent)))
        extent = tuple(size if a == axis else e for a, e in enumerate(global_extent))
        parts.append(Region(offset=offset, extent=extent))
        start += size
    return parts


def slice_to_cap(r: Region, cap: int) -> list[Region]:
    """Cut ``r`` into pieces of at most ``cap`` cells.

    Whole hyperplanes along axis 0 are grouped greedily; only when a single
    hyperplane already exceeds ``cap`` does slicing descend to the next axis.
    The pieces tile ``r`` and number at most ``2 * ceil(volume(r) / cap)``.
    """
    if cap < 1:
        msg = f"cap must be >= 1, got {cap}"
        raise ValueError(msg)
    if volume(r) <= cap:
        return [r]
    pieces: list[Region] = []
    _slice_axis(list(r.offset), list(r.extent), 0, cap, pieces)
    return pieces


def _slice_axis(
    offset: list[int], extent: list[int], axis: int, cap: int, out: list[Region]
) -> None:
    plane = math.prod(extent[axis + 1 :])
    if plane <= cap:
        step = cap // plane
        start = offset[axis]
        stop = start + extent[axis]
        for lo in range(start, stop, step):
            piece_offset = [*offset[:axis], lo, *offset[axis + 1 :]]
            piece_extent = [*extent[:axis], min(step, stop - lo), *extent[axis + 1 :]]
            out.append(Region(offset=tuple(piece_offset), extent=tuple(piece_extent)))
        return
    for i in range(offset[axis], offset[axis] + extent[axis]):
        _slice_axis(
            [*offset[:axis], i, *offset[axis + 1 :]],
            [*extent[:axis], 1, *extent[axis + 1 :]],
            axis + 1,
            cap,
            out,
        )


def cells(r: Region) -> Iterator[Index]:
    """Every cell coordinate of ``r`` in C order."""
    return itertools.product(*(range(o, s) for o, s in zip(r.offset, r.stop, strict=True)))


def relative_slices(outer: Region, inner: Region) -> tuple[slice, ...]:
    """Index ``inner`` inside an array laid out with the shape of ``outer``."""
    if not contains(outer, inner):
        msg = f"{inner} is not inside {outer}"
        raise ValueError(msg)
    return tuple(
        slice(i - o, i - o + e)
        for o, i, e in zip(outer.offset, inner.offset, inner.extent, strict=True)
    )
