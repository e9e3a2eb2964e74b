"""Self-describing data model: datasets, regions, chunks and step announcements.

Every engine and tool shares these immutable values. Geometry is expressed in
cells with the slowest-varying axis first; byte sizes are derived from the
element kind of a dataset.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Literal

import numpy as np

from .errors import ChunkValidationError, DecodeError, TruncatedError, VersionMismatchError

if TYPE_CHECKING:
    from collections.abc import Iterable

    from .types import (
        AnnouncementDoc,
        AttributeValue,
        ChunkDoc,
        DatasetDoc,
        ElemKind,
        Extent,
        RegionDoc,
    )

ANNOUNCEMENT_VERSION = 1

# 4-byte version tag followed by an 8-byte little-endian document length
_PREFIX = struct.Struct("<IQ")

ELEM_WIDTHS: dict[ElemKind, int] = {
    "i1": 1,
    "i2": 2,
    "i4": 4,
    "i8": 8,
    "u1": 1,
    "u2": 2,
    "u4": 4,
    "u8": 8,
    "f4": 4,
    "f8": 8,
}

_INT64_MIN = -(2**63)
_INT64_MAX = 2**63 - 1


def elem_width(kind: ElemKind) -> int:
    """Byte width of one element of ``kind``."""
    return ELEM_WIDTHS[kind]


def elem_dtype(kind: ElemKind) -> np.dtype[Any]:
    """Little-endian numpy dtype for ``kind``."""
    return np.dtype(f"<{kind}")


# ---------------------------------------------------------------------------
# Geometry values
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Region:
    """An n-dimensional hyperslab ``[offset, offset + extent)`` in cells."""

    offset: tuple[int, ...]
    extent: Extent

    def __post_init__(self) -> None:
        object.__setattr__(self, "offset", tuple(int(v) for v in self.offset))
        object.__setattr__(self, "extent", tuple(int(v) for v in self.extent))
        if not self.extent:
            msg = "region must have at least one axis"
            raise ValueError(msg)
        if len(self.offset) != len(self.extent):
            msg = f"offset rank {len(self.offset)} != extent rank {len(self.extent)}"
            raise ValueError(msg)
        if any(v < 0 for v in self.offset):
            msg = f"negative offset {self.offset}"
            raise ValueError(msg)
        if any(v < 1 for v in self.extent):
            msg = f"region extent must be >= 1 on every axis, got {self.extent}"
            raise ValueError(msg)

    @property
    def rank(self) -> int:
        return len(self.extent)

    @property
    def stop(self) -> tuple[int, ...]:
        """Exclusive upper corner."""
        return tuple(o + e for o, e in zip(self.offset, self.extent, strict=True))

    @classmethod
    def whole(cls, extent: Extent) -> Region:
        """The region covering an entire dataset of ``extent``."""
        return cls(offset=(0,) * len(extent), extent=tuple(extent))

    def to_dict(self) -> RegionDoc:
        return {"offset": list(self.offset), "extent": list(self.extent)}

    @classmethod
    def from_dict(cls, doc: RegionDoc) -> Region:
        return cls(offset=tuple(doc["offset"]), extent=tuple(doc["extent"]))

    def __str__(self) -> str:
        axes = "x".join(f"[{o}..{s})" for o, s in zip(self.offset, self.stop, strict=True))
        return axes


def volume(r: Region) -> int:
    """Number of cells in ``r``; the offset is irrelevant."""
    return math.prod(r.extent)


# ---------------------------------------------------------------------------
# Dataset and chunk declarations
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class DatasetDecl:
    """A named n-dimensional dataset with a fixed element kind and global extent."""

    name: str
    elem_kind: ElemKind
    global_extent: Extent

    def __post_init__(self) -> None:
        object.__setattr__(self, "global_extent", tuple(int(v) for v in self.global_extent))
        if not self.name or any(part == "" for part in self.name.split("/")):
            msg = f"invalid dataset name {self.name!r}: empty path component"
            raise ValueError(msg)
        if self.elem_kind not in ELEM_WIDTHS:
            msg = f"unsupported element kind {self.elem_kind!r}"
            raise ValueError(msg)
        if not self.global_extent or any(v < 1 for v in self.global_extent):
            msg = f"dataset {self.name!r} has zero or empty extent {self.global_extent}"
            raise ValueError(msg)

    @property
    def width(self) -> int:
        return elem_width(self.elem_kind)

    @property
    def dtype(self) -> np.dtype[Any]:
        return elem_dtype(self.elem_kind)

    @property
    def nbytes(self) -> int:
        return math.prod(self.global_extent) * self.width

    def to_dict(self) -> DatasetDoc:
        return {
            "name": self.name,
            "elem_kind": self.elem_kind,
            "global_extent": list(self.global_extent),
        }

    @classmethod
    def from_dict(cls, doc: DatasetDoc) -> DatasetDecl:
        return cls(
            name=doc["name"], elem_kind=doc["elem_kind"], global_extent=tuple(doc["global_extent"])
        )


@dataclass(frozen=True, slots=True)
class WrittenChunk:
    """A region of one dataset published by one producer rank."""

    dataset: str
    region: Region
    producer_rank: int
    hostname: str

    def __post_init__(self) -> None:
        if self.producer_rank < 0:
            msg = f"producer rank must be >= 0, got {self.producer_rank}"
            raise ValueError(msg)

    def to_dict(self) -> ChunkDoc:
        return {
            "dataset": self.dataset,
            "region": self.region.to_dict(),
            "producer_rank": self.producer_rank,
            "hostname": self.hostname,
        }

    @classmethod
    def from_dict(cls, doc: ChunkDoc) -> WrittenChunk:
        return cls(
            dataset=doc["dataset"],
            region=Region.from_dict(doc["region"]),
            producer_rank=doc["producer_rank"],
            hostname=doc["hostname"],
        )


def chunk_sort_key(c: WrittenChunk) -> tuple[int, str, tuple[int, ...]]:
    """Canonical chunk-table order: producer rank, dataset name, offset."""
    return (c.producer_rank, c.dataset, c.region.offset)


@dataclass(frozen=True, slots=True)
class Violation:
    """Why a chunk does not fit its dataset."""

    kind: Literal["rank_mismatch", "out_of_bounds", "wrong_dataset"]
    message: str
    axis: int | None = None


def validate_chunk(c: WrittenChunk, d: DatasetDecl) -> Violation | None:
    """Check that ``c`` lies inside the global extent of ``d``.

    Args:
        c: The written chunk.
        d: The declaration of the dataset the chunk belongs to.

    Returns:
        ``None`` if the chunk fits, otherwise a :class:`Violation` naming the
        first offending axis.
    """
    if c.dataset != d.name:
        return Violation("wrong_dataset", f"chunk of {c.dataset!r} checked against {d.name!r}")
    if c.region.rank != len(d.global_extent):
        return Violation(
            "rank_mismatch",
            f"chunk rank {c.region.rank} != dataset rank {len(d.global_extent)} ({d.name})",
        )
    for axis, (stop, limit) in enumerate(zip(c.region.stop, d.global_extent, strict=True)):
        if stop > limit:
            return Violation(
                "out_of_bounds",
                f"{d.name}: axis {axis} ends at {stop}, extent is {limit}",
                axis=axis,
            )
    return None


# ---------------------------------------------------------------------------
# Attributes
# ---------------------------------------------------------------------------


def _check_scalar(key: str, value: object) -> None:
    if isinstance(value, bool) or not isinstance(value, int | float | str):
        msg = f"attribute {key!r}: unsupported value type {type(value).__name__}"
        raise ValueError(msg)
    if isinstance(value, int) and not _INT64_MIN <= value <= _INT64_MAX:
        msg = f"attribute {key!r}: integer {value} does not fit 64 bits"
        raise ValueError(msg)
    if isinstance(value, float) and not math.isfinite(value):
        msg = f"attribute {key!r}: non-finite float"
        raise ValueError(msg)


def normalize_attribute(key: str, value: object) -> AttributeValue:
    """Validate an attribute value and turn lists into tuples.

    Allowed: 64-bit integers, finite floats, strings and homogeneous lists of
    one of those.
    """
    if isinstance(value, list | tuple):
        for item in value:
            _check_scalar(key, item)
        kinds = {type(item) for item in value}
        if len(kinds) > 1:
            msg = f"attribute {key!r}: list mixes {sorted(k.__name__ for k in kinds)}"
            raise ValueError(msg)
        return tuple(value)
    _check_scalar(key, value)
    return value  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Step announcement
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepAnnouncement:
    """Self-describing metadata for one step of a series."""

    step_index: int
    datasets: tuple[DatasetDecl, ...] = ()
    attributes: dict[str, AttributeValue] = field(default_factory=dict)
    chunk_table: tuple[WrittenChunk, ...] = ()

    def __post_init__(self) -> None:
        if self.step_index < 0:
            msg = f"step index must be >= 0, got {self.step_index}"
            raise ValueError(msg)
        object.__setattr__(self, "datasets", tuple(self.datasets))
        object.__setattr__(self, "chunk_table", tuple(self.chunk_table))
        object.__setattr__(
            self,
            "attributes",
            {k: normalize_attribute(k, v) for k, v in sorted(self.attributes.items())},
        )
        decls = self.decls
        if len(decls) != len(self.datasets):
            msg = f"step {self.step_index}: duplicate dataset declarations"
            raise ValueError(msg)
        for chunk in self.chunk_table:
            decl = decls.get(chunk.dataset)
            if decl is None:
                msg = f"step {self.step_index}: chunk references undeclared {chunk.dataset!r}"
                raise ChunkValidationError(msg)
            violation = validate_chunk(chunk, decl)
            if violation is not None:
                raise ChunkValidationError(violation.message)

    @property
    def decls(self) -> dict[str, DatasetDecl]:
        """Dataset declarations keyed by name."""
        return {d.name: d for d in self.datasets}

    def to_dict(self) -> AnnouncementDoc:
        return {
            "step_index": self.step_index,
            "datasets": [d.to_dict() for d in self.datasets],
            "attributes": {
                k: list(v) if isinstance(v, tuple) else v for k, v in self.attributes.items()
            },
            "chunk_table": [c.to_dict() for c in self.chunk_table],
        }

    @classmethod
    def from_dict(cls, doc: AnnouncementDoc) -> StepAnnouncement:
        return cls(
            step_index=doc["step_index"],
            datasets=tuple(DatasetDecl.from_dict(d) for d in doc["datasets"]),
            attributes=dict(doc["attributes"]),  # type: ignore[arg-type]
            chunk_table=tuple(WrittenChunk.from_dict(c) for c in doc["chunk_table"]),
        )


def build_announcement(
    step_index: int,
    datasets: Iterable[DatasetDecl],
    attributes: dict[str, AttributeValue],
    chunks: Iterable[WrittenChunk],
) -> StepAnnouncement:
    """Assemble an announcement with datasets by name and chunks in canonical order."""
    return StepAnnouncement(
        step_index=step_index,
        datasets=tuple(sorted(datasets, key=lambda d: d.name)),
        attributes=attributes,
        chunk_table=tuple(sorted(chunks, key=chunk_sort_key)),
    )


def encode_announcement(s: StepAnnouncement) -> bytes:
    """Canonical encoding: version tag, 8-byte LE length, sorted-key UTF-8 JSON."""
    body = json.dumps(
        s.to_dict(), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    ).encode("utf-8")
    return _PREFIX.pack(ANNOUNCEMENT_VERSION, len(body)) + body


def encoded_length(prefix: bytes) -> int:
    """Total encoded size of an announcement given at least its 12-byte prefix."""
    if len(prefix) < _PREFIX.size:
        msg = f"announcement prefix needs {_PREFIX.size} bytes, got {len(prefix)}"
        raise TruncatedError(msg)
    version, length = _PREFIX.unpack_from(prefix)
    if version != ANNOUNCEMENT_VERSION:
        msg = f"announcement version {version}, expected {ANNOUNCEMENT_VERSION}"
        raise VersionMismatchError(msg)
    return int(_PREFIX.size + length)


def decode_announcement(data: bytes) -> StepAnnouncement:
    """Inverse of :func:`encode_announcement`.

    Raises:
        TruncatedError: ``data`` is shorter than its length prefix says.
        VersionMismatchError: unknown version tag.
        DecodeError: trailing bytes or a malformed document.
    """
    total = encoded_length(data)
    if len(data) < total:
        msg = f"announcement truncated: {len(data)} of {total} bytes"
        raise TruncatedError(msg)
    if len(data) > total:
        msg = f"{len(data) - total} trailing bytes after announcement"
        raise DecodeError(msg)
    try:
        doc = json.loads(data[_PREFIX.size :].decode("utf-8"))
        return StepAnnouncement.from_dict(doc)
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        msg = f"malformed announcement: {exc}"
        raise DecodeError(msg) from exc
