"""Step-based writer and reader handles, independent of the backend.

The application drives a handle through the same calls whichever engine the
:class:`~src.config.EngineConfig` selects::

    with open_writer("run", group, cfg) as w:
        w.begin_step()
        w.put_chunk(decl, region, payload)
        w.end_step()

    with open_reader("run", readers, cfg) as r:
        while (step := r.next_step()) is not None:
            data = r.get_region(decl, region)
            r.release_step()
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import StrEnum
from typing import TYPE_CHECKING, Self

import numpy as np

from .config import EngineConfig, default_hostname
from .distribution import Assignment, ChunkSlab, RankMeta, assign
from .errors import ChunkValidationError, StepStateError, UnavailableRegionError
from .geometry import contains, intersect
from .model import (
    DatasetDecl,
    Region,
    StepAnnouncement,
    WrittenChunk,
    build_announcement,
    chunk_sort_key,
    normalize_attribute,
    validate_chunk,
    volume,
)
from .utils import copy_region, payload_array

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence
    from types import TracebackType

    from .types import AttributeValue

logger = logging.getLogger(__name__)


class StepOutcome(StrEnum):
    PUBLISHED = "published"
    DISCARDED = "discarded"
    WRITTEN = "written"


def local_group(n_ranks: int = 1, hostname: str | None = None) -> list[RankMeta]:
    """Ranks ``0..n_ranks-1`` all on this host."""
    host = hostname or default_hostname()
    return [RankMeta(rank, host) for rank in range(n_ranks)]


def _check_group(group: Sequence[RankMeta], what: str) -> list[RankMeta]:
    ordered = sorted(group, key=lambda m: m.rank)
    if not ordered:
        msg = f"{what} group is empty"
        raise ValueError(msg)
    ranks = [m.rank for m in ordered]
    if len(set(ranks)) != len(ranks):
        msg = f"duplicate ranks in {what} group: {ranks}"
        raise ValueError(msg)
    return ordered


@dataclass
class _OpenStep:
    index: int
    decls: dict[str, DatasetDecl] = field(default_factory=dict)
    attributes: dict[str, AttributeValue] = field(default_factory=dict)
    chunks: list[tuple[WrittenChunk, np.ndarray]] = field(default_factory=list)


class WriterHandle(ABC):
    """Publishes steps of a series for the writer ranks hosted by this process.

    ``group`` lists the ranks of this process; ``group_size`` is the size of
    the whole writer group, whose other ranks may live in other processes.
    It defaults to one past the highest rank in ``group``.
    """

    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        *,
        group_size: int | None = None,
    ) -> None:
        self.series_name = series_name
        self.group = _check_group(group, "writer")
        self.cfg = cfg
        top = self.group[-1].rank + 1
        self.group_size = top if group_size is None else group_size
        if self.group[0].rank < 0 or self.group_size < top:
            msg = f"ranks {[m.rank for m in self.group]} do not fit a group of {self.group_size}"
            raise ValueError(msg)
        self._hosts = {m.rank: m.hostname for m in self.group}
        self._step: _OpenStep | None = None
        self._last_index = -1
        self._closed = False
        self.outcomes: dict[int, StepOutcome] = {}

    # -- step bracket --------------------------------------------------------

    def begin_step(self, step_index: int | None = None) -> int:
        """Open the next step; the index defaults to one past the previous step.

        Raises:
            StepStateError: a step is already open, the handle is closed, or the
                index does not increase.
        """
        if self._closed:
            msg = "writer is closed"
            raise StepStateError(msg)
        if self._step is not None:
            msg = f"step {self._step.index} is still open"
            raise StepStateError(msg)
        index = self._last_index + 1 if step_index is None else step_index
        if index <= self._last_index:
            msg = f"step index {index} does not follow {self._last_index}"
            raise StepStateError(msg)
        self._step = _OpenStep(index)
        return index

    def _open_step(self) -> _OpenStep:
        if self._step is None:
            msg = "no step is open; call begin_step() first"
            raise StepStateError(msg)
        return self._step

    def set_attribute(self, key: str, value: object) -> None:
        self._open_step().attributes[key] = normalize_attribute(key, value)

    def declare_dataset(self, decl: DatasetDecl) -> None:
        """Announce ``decl`` in the open step even if this writer puts no chunk of it."""
        step = self._open_step()
        known = step.decls.setdefault(decl.name, decl)
        if known != decl:
            msg = f"{decl.name}: redeclared as {decl} within step {step.index}"
            raise ChunkValidationError(msg)

    def put_chunk(
        self,
        decl: DatasetDecl,
        region: Region,
        payload: bytes | bytearray | memoryview | np.ndarray,
        rank: int | None = None,
    ) -> None:
        """Stage one chunk of the open step.

        Args:
            decl: Dataset the chunk belongs to; declared on first use in a step.
            region: Cells covered by ``payload``.
            payload: C-order little-endian bytes, or an array of ``decl.dtype``.
            rank: Producing rank; may be omitted when the group has one rank.

        Raises:
            StepStateError: no open step.
            PayloadSizeError: payload length does not match the region.
            ChunkValidationError: conflicting declaration, out of bounds, or
                overlap with an earlier chunk of the same dataset.
        """
        step = self._open_step()
        producer = self._producer(rank)
        known = step.decls.get(decl.name)
        if known is not None and known != decl:
            msg = f"{decl.name}: redeclared as {decl} within step {step.index}"
            raise ChunkValidationError(msg)
        chunk = WrittenChunk(decl.name, region, producer, self._hosts[producer])
        violation = validate_chunk(chunk, decl)
        if violation is not None:
            raise ChunkValidationError(violation.message)
        for other, _ in step.chunks:
            if other.dataset == decl.name and intersect(other.region, region) is not None:
                msg = f"{decl.name}: chunk {region} overlaps {other.region}"
                raise ChunkValidationError(msg)
        arr = payload_array(payload, decl, region)
        if not isinstance(payload, bytes):
            # the caller may reuse its buffer after put_chunk returns
            arr = arr.copy()
        step.decls[decl.name] = decl
        step.chunks.append((chunk, arr))

    def _producer(self, rank: int | None) -> int:
        if rank is None:
            if len(self.group) != 1:
                msg = "rank is required when the writer hosts several ranks"
                raise ValueError(msg)
            return self.group[0].rank
        if rank not in self._hosts:
            msg = f"rank {rank} is not part of this writer group"
            raise ValueError(msg)
        return rank

    def end_step(self) -> StepOutcome:
        """Close the open step and hand it to the backend."""
        step = self._open_step()
        self._step = None
        self._last_index = step.index
        ordered = sorted(step.chunks, key=lambda item: chunk_sort_key(item[0]))
        announcement = build_announcement(
            step.index, step.decls.values(), step.attributes, (c for c, _ in ordered)
        )
        payloads = {i: arr for i, (_, arr) in enumerate(ordered)}
        outcome = self._publish(announcement, payloads)
        self.outcomes[step.index] = outcome
        logger.debug("step %d %s (%d chunks)", step.index, outcome, len(payloads))
        return outcome

    @abstractmethod
    def _publish(
        self, announcement: StepAnnouncement, payloads: dict[int, np.ndarray]
    ) -> StepOutcome:
        """Hand a finished step to the backend."""

    # -- lifecycle -----------------------------------------------------------

    def close(self) -> None:
        if self._closed:
            return
        if self._step is not None:
            logger.warning("closing %s with step %d still open", self.series_name, self._step.index)
            self._step = None
        self._closed = True
        self._shutdown()

    @abstractmethod
    def _shutdown(self) -> None: ...

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()


class ReaderHandle(ABC):
    """Consumes steps of a series on behalf of (part of) a reader group.

    ``group`` is the whole reader group the distribution strategy runs over;
    ``local_ranks`` are the ranks this handle loads for (default: all).
    """

    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        local_ranks: Iterable[int] | None = None,
    ) -> None:
        self.series_name = series_name
        self.group = _check_group(group, "reader")
        self.cfg = cfg
        ranks = {m.rank for m in self.group}
        self.local_ranks = sorted(ranks if local_ranks is None else set(local_ranks))
        if not self.local_ranks or not set(self.local_ranks) <= ranks:
            msg = f"local ranks {self.local_ranks} are not a nonempty subset of {sorted(ranks)}"
            raise ValueError(msg)
        self._current: StepAnnouncement | None = None
        self._assignment: Assignment | None = None
        self._ended = False
        self._last_index = -1
        self._closed = False

    @property
    def current(self) -> StepAnnouncement | None:
        return self._current

    def next_step(self) -> StepAnnouncement | None:
        """Block until the next step is available; ``None`` at end of stream.

        An unreleased current step is released first.
        """
        if self._closed:
            msg = "reader is closed"
            raise StepStateError(msg)
        if self._current is not None:
            self.release_step()
        if self._ended:
            return None
        step = self._next()
        if step is None:
            self._ended = True
            logger.info("%s: end of stream after step %d", self.series_name, self._last_index)
            return None
        if step.step_index <= self._last_index:
            msg = f"step {step.step_index} arrived after step {self._last_index}"
            raise StepStateError(msg)
        self._last_index = step.step_index
        self._current = step
        self._assignment = None
        return step

    def _step_open(self) -> StepAnnouncement:
        if self._current is None:
            msg = "no step is open; call next_step() first"
            raise StepStateError(msg)
        return self._current

    @property
    def assignment(self) -> Assignment:
        """The configured strategy's assignment of the current step over the whole group."""
        step = self._step_open()
        if self._assignment is None:
            self._assignment = assign(
                self.cfg.strategy, step.chunk_table, self.group, step.datasets
            )
        return self._assignment

    def get_array(
        self, dataset: DatasetDecl | str, region: Region, rank: int | None = None
    ) -> np.ndarray:
        """Assemble ``region`` of ``dataset`` from every chunk intersecting it.

        ``rank`` names the local reader rank the load is accounted to.

        Raises:
            UnavailableRegionError: part of the region was never written.
        """
        step = self._step_open()
        name = dataset if isinstance(dataset, str) else dataset.name
        decl = step.decls.get(name)
        if decl is None:
            msg = f"step {step.step_index} has no dataset {name!r}"
            raise UnavailableRegionError(msg)
        if not contains(Region.whole(decl.global_extent), region):
            msg = f"{name}: region {region} exceeds extent {decl.global_extent}"
            raise ValueError(msg)
        reader = self._reader_rank(rank)
        pieces = [
            (i, c, part)
            for i, c in enumerate(step.chunk_table)
            if c.dataset == name and (part := intersect(c.region, region)) is not None
        ]
        covered = sum(volume(part) for _, _, part in pieces)
        if covered != volume(region):
            msg = f"{name}: only {covered} of {volume(region)} cells of {region} were written"
            raise UnavailableRegionError(msg)
        out = np.empty(region.extent, dtype=decl.dtype)
        for i, c, part in pieces:
            data = self._fetch(i, c, decl, part, reader)
            copy_region(out, region, data, part, part)
        return out

    def get_region(
        self, dataset: DatasetDecl | str, region: Region, rank: int | None = None
    ) -> bytes:
        """C-order bytes of ``region``; see :meth:`get_array`."""
        return self.get_array(dataset, region, rank).tobytes()

    def load_assigned(self, rank: int | None = None) -> list[tuple[ChunkSlab, np.ndarray]]:
        """Load every slab the strategy assigns to ``rank`` in the current step."""
        step = self._step_open()
        reader = self._reader_rank(rank)
        out: list[tuple[ChunkSlab, np.ndarray]] = []
        for slab in self.assignment.slabs(reader):
            chunk = step.chunk_table[slab.source]
            decl = step.decls[chunk.dataset]
            out.append((slab, self._fetch(slab.source, chunk, decl, slab.region, reader)))
        return out

    def _reader_rank(self, rank: int | None) -> int:
        if rank is None:
            return self.local_ranks[0]
        if rank not in self.local_ranks:
            msg = f"rank {rank} is not hosted by this reader"
            raise ValueError(msg)
        return rank

    def release_step(self) -> None:
        """Tell the backend the current step is no longer needed."""
        step = self._step_open()
        self._current = None
        self._assignment = None
        self._release(step)

    @abstractmethod
    def _next(self) -> StepAnnouncement | None: ...

    @abstractmethod
    def _fetch(
        self, index: int, chunk: WrittenChunk, decl: DatasetDecl, part: Region, reader: int
    ) -> np.ndarray:
        """Cells of ``part`` (inside chunk ``index``) shaped like ``part.extent``."""

    @abstractmethod
    def _release(self, step: StepAnnouncement) -> None: ...

    def close(self) -> None:
        if self._closed:
            return
        if self._current is not None:
            self.release_step()
        self._closed = True
        self._shutdown()

    @abstractmethod
    def _shutdown(self) -> None: ...

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()


def open_writer(
    series_name: str,
    group: Sequence[RankMeta],
    cfg: EngineConfig | None = None,
    *,
    group_size: int | None = None,
) -> WriterHandle:
    """Open the writer backend ``cfg.engine`` selects.

    Processes sharing one writer group each open their own handle with their
    own ranks in ``group`` and the same ``group_size``.
    """
    cfg = cfg or EngineConfig.resolve()
    if cfg.engine == "stream":
        from .stream import StreamWriter

        return StreamWriter(series_name, group, cfg, group_size=group_size)
    from .file_engine import FileWriter

    return FileWriter(series_name, group, cfg, group_size=group_size)


def open_reader(
    series_name: str,
    group: Sequence[RankMeta],
    cfg: EngineConfig | None = None,
    local_ranks: Iterable[int] | None = None,
    *,
    recover: bool = False,
) -> ReaderHandle:
    """Open the reader backend ``cfg.engine`` selects.

    ``recover`` lets the file engine fall back to a record scan when a
    container footer is damaged; the stream engine ignores it.
    """
    cfg = cfg or EngineConfig.resolve()
    if cfg.engine == "stream":
        from .stream import StreamReader

        return StreamReader(series_name, group, cfg, local_ranks)
    from .file_engine import FileReader

    return FileReader(series_name, group, cfg, local_ranks, recover=recover)
