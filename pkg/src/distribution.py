"""Chunk distribution strategies: which reader loads which part of a step.

Four strategies share one interface and each returns a complete
:class:`Assignment`: every written cell goes to exactly one reader.

- ``round_robin``  deals whole chunks cyclically.
- ``hyperslabs``   cuts each dataset into one slab per reader and intersects.
- ``binpacking``   slices chunks to the ideal per-reader size and packs them
  with Next-Fit.
- ``by_hostname``  keeps data on its host using a secondary strategy and hands
  chunks from reader-less hosts to a fallback strategy.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, cast

from .errors import ChunkValidationError, ConfigError
from .geometry import intersect, partition_axis, slice_to_cap
from .model import chunk_sort_key, volume

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from .model import DatasetDecl, Region, WrittenChunk
    from .types import StrategyDoc, StrategyKind

STRATEGY_KINDS: tuple[StrategyKind, ...] = (
    "round_robin",
    "hyperslabs",
    "binpacking",
    "by_hostname",
)

type _Indexed = list[tuple[int, WrittenChunk]]
type _Slabs = dict[int, list[ChunkSlab]]


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class RankMeta:
    """One rank of a process group and the host it runs on."""

    rank: int
    hostname: str


@dataclass(frozen=True, slots=True)
class ChunkSlab:
    """Part of one written chunk; ``source`` indexes the step's chunk table."""

    source: int
    region: Region


@dataclass(frozen=True)
class Assignment:
    """Reader rank → slabs that reader loads. Every reader of the group is a key."""

    per_reader: dict[int, tuple[ChunkSlab, ...]] = field(default_factory=dict)

    def slabs(self, rank: int) -> tuple[ChunkSlab, ...]:
        return self.per_reader.get(rank, ())

    @property
    def readers(self) -> list[int]:
        return sorted(self.per_reader)


@dataclass(frozen=True)
class StrategySpec:
    """Which strategy to run, with its parameters."""

    kind: StrategyKind
    axis: int = 0
    secondary: StrategySpec | None = None
    fallback: StrategySpec | None = None

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            msg = f"unknown strategy kind {self.kind!r}; expected one of {STRATEGY_KINDS}"
            raise ConfigError(msg)
        if self.axis < 0:
            msg = f"hyperslab axis must be >= 0, got {self.axis}"
            raise ConfigError(msg)
        if self.kind == "by_hostname":
            if self.secondary is None or self.fallback is None:
                msg = "by_hostname needs both a secondary and a fallback strategy"
                raise ConfigError(msg)
            for inner in (self.secondary, self.fallback):
                if inner.kind == "by_hostname":
                    msg = "by_hostname may not nest another by_hostname"
                    raise ConfigError(msg)
        elif self.secondary is not None or self.fallback is not None:
            msg = f"{self.kind} takes no secondary or fallback strategy"
            raise ConfigError(msg)

    @classmethod
    def from_dict(cls, doc: StrategyDoc | Mapping[str, object]) -> StrategySpec:
        """Parse ``{"kind": ..., "axis": ..., "secondary": {...}, "fallback": {...}}``."""
        raw = dict(doc)
        unknown = set(raw) - {"kind", "axis", "secondary", "fallback"}
        if unknown:
            msg = f"unknown strategy keys: {sorted(unknown)}"
            raise ConfigError(msg)
        if "kind" not in raw:
            msg = "strategy needs a 'kind'"
            raise ConfigError(msg)
        secondary = raw.get("secondary")
        fallback = raw.get("fallback")
        axis = raw.get("axis", 0)
        if not isinstance(axis, int) or isinstance(axis, bool):
            msg = f"strategy axis must be an integer, got {axis!r}"
            raise ConfigError(msg)
        return cls(
            kind=cast("StrategyKind", raw["kind"]),
            axis=axis,
            secondary=cls.from_dict(cast("StrategyDoc", secondary)) if secondary else None,
            fallback=cls.from_dict(cast("StrategyDoc", fallback)) if fallback else None,
        )

    def to_dict(self) -> StrategyDoc:
        doc: StrategyDoc = {"kind": self.kind}
        if self.kind == "hyperslabs":
            doc["axis"] = self.axis
        if self.secondary is not None:
            doc["secondary"] = self.secondary.to_dict()
        if self.fallback is not None:
            doc["fallback"] = self.fallback.to_dict()
        return doc

    def describe(self) -> str:
        """Short label, e.g. ``by_hostname(binpacking|round_robin)``."""
        if self.kind == "by_hostname":
            assert self.secondary is not None and self.fallback is not None
            return f"by_hostname({self.secondary.describe()}|{self.fallback.describe()})"
        if self.kind == "hyperslabs" and self.axis:
            return f"hyperslabs(axis={self.axis})"
        return self.kind


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------


def _check_readers(readers: Sequence[RankMeta]) -> list[RankMeta]:
    if not readers:
        msg = "cannot distribute over an empty reader group"
        raise ValueError(msg)
    ranks = [r.rank for r in readers]
    if len(set(ranks)) != len(ranks):
        msg = f"duplicate reader ranks in {ranks}"
        raise ValueError(msg)
    return sorted(readers, key=lambda r: r.rank)


def _indexed(chunks: Sequence[WrittenChunk]) -> _Indexed:
    """Chunk-table indices paired with chunks, in deterministic dealing order."""
    return sorted(enumerate(chunks), key=lambda item: (chunk_sort_key(item[1]), item[0]))


def _widths(dataset_decls: Iterable[DatasetDecl] | None) -> dict[str, int]:
    return {d.name: d.width for d in dataset_decls or ()}


def _finish(slabs: _Slabs, readers: Sequence[RankMeta]) -> Assignment:
    return Assignment(per_reader={r.rank: tuple(slabs.get(r.rank, ())) for r in readers})


def ideal_amount(total: int, n_readers: int) -> int:
    """Balancing target per reader: ``ceil(total / n_readers)``."""
    return -(-total // n_readers)


# ---------------------------------------------------------------------------
# Strategies (internal forms work on index-carrying chunk lists)
# ---------------------------------------------------------------------------


def _round_robin(indexed: _Indexed, readers: list[RankMeta]) -> _Slabs:
    out: _Slabs = defaultdict(list)
    for i, (source, chunk) in enumerate(indexed):
        out[readers[i % len(readers)].rank].append(ChunkSlab(source, chunk.region))
    return out


def _hyperslabs(
    indexed: _Indexed, readers: list[RankMeta], decls: Mapping[str, DatasetDecl], axis: int
) -> _Slabs:
    out: _Slabs = defaultdict(list)
    partitions: dict[str, list[Region | None]] = {}
    for source, chunk in indexed:
        decl = decls.get(chunk.dataset)
        if decl is None:
            msg = f"chunk {source} references undeclared dataset {chunk.dataset!r}"
            raise ChunkValidationError(msg)
        if chunk.dataset not in partitions:
            partitions[chunk.dataset] = partition_axis(decl.global_extent, len(readers), axis)
        for reader, slab in zip(readers, partitions[chunk.dataset], strict=True):
            if slab is None:
                continue
            piece = intersect(chunk.region, slab)
            if piece is not None:
                out[reader.rank].append(ChunkSlab(source, piece))
    return out


def _binpacking(indexed: _Indexed, readers: list[RankMeta], widths: Mapping[str, int]) -> _Slabs:
    out: _Slabs = defaultdict(list)
    total = sum(volume(c.region) * widths.get(c.dataset, 1) for _, c in indexed)
    if total == 0:
        return out
    ideal = ideal_amount(total, len(readers))

    pieces: list[tuple[ChunkSlab, int]] = []
    for source, chunk in indexed:
        width = widths.get(chunk.dataset, 1)
        for piece in slice_to_cap(chunk.region, max(1, ideal // width)):
            pieces.append((ChunkSlab(source, piece), volume(piece) * width))

    # Next-Fit: open a new bin whenever the next piece does not fit the current one
    bins: list[list[ChunkSlab]] = []
    load = 0
    for slab, size in pieces:
        if not bins or load + size > ideal:
            bins.append([])
            load = 0
        bins[-1].append(slab)
        load += size

    for j, packed in enumerate(bins):
        out[readers[j % len(readers)].rank].extend(packed)
    return out


def _by_hostname(
    indexed: _Indexed,
    readers: list[RankMeta],
    secondary: StrategySpec,
    fallback: StrategySpec,
    decls: Mapping[str, DatasetDecl],
) -> _Slabs:
    readers_by_host: dict[str, list[RankMeta]] = defaultdict(list)
    for reader in readers:
        readers_by_host[reader.hostname].append(reader)
    chunks_by_host: dict[str, _Indexed] = defaultdict(list)
    for item in indexed:
        chunks_by_host[item[1].hostname].append(item)

    out: _Slabs = defaultdict(list)
    leftover: _Indexed = []
    for host in sorted(chunks_by_host):
        local_readers = readers_by_host.get(host)
        if not local_readers:
            leftover.extend(chunks_by_host[host])
            continue
        for rank, slabs in _dispatch(secondary, chunks_by_host[host], local_readers, decls).items():
            out[rank].extend(slabs)

    if leftover:
        leftover.sort(key=lambda item: (chunk_sort_key(item[1]), item[0]))
        for rank, slabs in _dispatch(fallback, leftover, readers, decls).items():
            out[rank].extend(slabs)
    return out


def _dispatch(
    spec: StrategySpec,
    indexed: _Indexed,
    readers: list[RankMeta],
    decls: Mapping[str, DatasetDecl],
) -> _Slabs:
    """Route to the strategy named by ``spec.kind``."""
    if spec.kind == "round_robin":
        return _round_robin(indexed, readers)

    elif spec.kind == "hyperslabs":
        return _hyperslabs(indexed, readers, decls, spec.axis)

    elif spec.kind == "binpacking":
        return _binpacking(indexed, readers, {name: d.width for name, d in decls.items()})

    else:
        assert spec.secondary is not None and spec.fallback is not None
        return _by_hostname(indexed, readers, spec.secondary, spec.fallback, decls)


# ---------------------------------------------------------------------------
# Public entry points
# ---------------------------------------------------------------------------


def assign(
    spec: StrategySpec,
    chunks: Sequence[WrittenChunk],
    readers: Sequence[RankMeta],
    dataset_decls: Iterable[DatasetDecl] = (),
) -> Assignment:
    """Distribute a step's chunk table over a reader group.

    Args:
        spec: Strategy to run.
        chunks: The step's chunk table; ``ChunkSlab.source`` indexes into it.
        readers: The whole reader group; ranks unique and contiguous from 0.
        dataset_decls: Declarations of every dataset the chunks reference.

    Returns:
        A complete, deterministic assignment listing every reader.

    Raises:
        ValueError: empty or malformed reader group.
    """
    ordered = _check_readers(readers)
    if [r.rank for r in ordered] != list(range(len(ordered))):
        msg = f"reader ranks must be contiguous from 0, got {[r.rank for r in ordered]}"
        raise ValueError(msg)
    decls = {d.name: d for d in dataset_decls}
    return _finish(_dispatch(spec, _indexed(chunks), ordered, decls), ordered)


def round_robin(chunks: Sequence[WrittenChunk], readers: Sequence[RankMeta]) -> Assignment:
    """Deal whole chunks cyclically in ``(producer_rank, dataset, offset)`` order."""
    ordered = _check_readers(readers)
    return _finish(_round_robin(_indexed(chunks), ordered), ordered)


def by_hyperslabs(
    chunks: Sequence[WrittenChunk],
    readers: Sequence[RankMeta],
    dataset_decls: Iterable[DatasetDecl],
    axis: int = 0,
) -> Assignment:
    """Give reader ``k`` the intersection of every chunk with its ``k``-th slab."""
    ordered = _check_readers(readers)
    decls = {d.name: d for d in dataset_decls}
    return _finish(_hyperslabs(_indexed(chunks), ordered, decls, axis), ordered)


def binpacking(
    chunks: Sequence[WrittenChunk],
    readers: Sequence[RankMeta],
    dataset_decls: Iterable[DatasetDecl] | None = None,
) -> Assignment:
    """Slice to the ideal size, Next-Fit pack, deal bins cyclically.

    Volumes are weighted by element byte width when ``dataset_decls`` is
    given, otherwise counted in cells. No reader receives more than
    ``2 * ceil(total / len(readers))``.
    """
    ordered = _check_readers(readers)
    return _finish(_binpacking(_indexed(chunks), ordered, _widths(dataset_decls)), ordered)


def by_hostname(
    chunks: Sequence[WrittenChunk],
    readers: Sequence[RankMeta],
    secondary: StrategySpec,
    fallback: StrategySpec,
    dataset_decls: Iterable[DatasetDecl] = (),
) -> Assignment:
    """Run ``secondary`` per host, then ``fallback`` over all readers for reader-less hosts."""
    spec = StrategySpec("by_hostname", secondary=secondary, fallback=fallback)
    ordered = _check_readers(readers)
    decls = {d.name: d for d in dataset_decls}
    assert spec.secondary is not None and spec.fallback is not None
    return _finish(
        _by_hostname(_indexed(chunks), ordered, spec.secondary, spec.fallback, decls), ordered
    )


# ---------------------------------------------------------------------------
# Quality measures
# ---------------------------------------------------------------------------


def reader_loads(
    a: Assignment,
    chunk_table: Sequence[WrittenChunk],
    dataset_decls: Iterable[DatasetDecl] | None = None,
) -> dict[int, int]:
    """Bytes (or cells, without declarations) each reader loads."""
    widths = _widths(dataset_decls)
    return {
        rank: sum(volume(s.region) * widths.get(chunk_table[s.source].dataset, 1) for s in slabs)
        for rank, slabs in a.per_reader.items()
    }


def imbalance(
    a: Assignment,
    chunk_table: Sequence[WrittenChunk],
    dataset_decls: Iterable[DatasetDecl] | None = None,
    *,
    ceil_ideal: bool = False,
) -> float:
    """Ratio of the heaviest reader's load to the ideal per-reader load.

    The ideal is ``total / readers``; with ``ceil_ideal`` it is the integer
    target binpacking packs against, ``ceil(total / readers)``. An
    assignment with no data has ratio 1.0.
    """
    loads = reader_loads(a, chunk_table, dataset_decls)
    total = sum(loads.values())
    if total == 0 or not loads:
        return 1.0
    ideal = ideal_amount(total, len(loads)) if ceil_ideal else total / len(loads)
    return max(loads.values()) / ideal


def connection_pairs(a: Assignment, chunk_table: Sequence[WrittenChunk]) -> set[tuple[int, int]]:
    """Distinct ``(writer_rank, reader_rank)`` pairs that exchange data."""
    return {
        (chunk_table[s.source].producer_rank, rank)
        for rank, slabs in a.per_reader.items()
        for s in slabs
    }
