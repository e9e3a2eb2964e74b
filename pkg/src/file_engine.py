"""File engine: aggregate container files in a series directory.

Writer ranks are grouped ``aggregation_group`` at a time; each group shares
one container ``<series>/data.<k>`` with ``k = rank // aggregation_group``.
Every container records every step, even when its ranks wrote nothing.

The process hosting rank ``k * aggregation_group`` is the only appender of
container ``k``. When other ranks of the aggregate live in other processes,
it listens for them, publishes its endpoint in ``<series>/appender.<k>.json``
and appends each step once every member has shipped its chunks.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .container import ContainerReader, ContainerWriter, container_path, list_containers
from .engine import ReaderHandle, StepOutcome, WriterHandle
from .errors import DecodeError, RendezvousTimeoutError
from .geometry import relative_slices
from .group import DISCARDED, GroupLeader, GroupMember, encode_part, merge_parts
from .model import build_announcement, chunk_sort_key
from .utils import write_json_atomic

if TYPE_CHECKING:
    from collections.abc import Iterable, Sequence

    from .config import EngineConfig
    from .distribution import RankMeta
    from .model import DatasetDecl, Region, StepAnnouncement, WrittenChunk
    from .types import AttributeValue

logger = logging.getLogger(__name__)

_POLL_S = 0.05


def appender_path(directory: Path, aggregate: int) -> Path:
    """Where the appender of ``aggregate`` publishes its endpoint."""
    return directory / f"appender.{aggregate}.json"


def _appender_endpoint(path: Path) -> str:
    try:
        return str(json.loads(path.read_text())["endpoint"])
    except json.JSONDecodeError as exc:
        msg = f"{path}: not valid JSON ({exc})"
        raise DecodeError(msg) from exc


class FileWriter(WriterHandle):
    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        *,
        group_size: int | None = None,
    ) -> None:
        super().__init__(series_name, group, cfg, group_size=group_size)
        self.directory = Path(series_name)
        self.directory.mkdir(parents=True, exist_ok=True)
        g = cfg.aggregation_group
        local = set(self._hosts)
        self._appenders: dict[int, ContainerWriter] = {}
        self._leaders: dict[int, GroupLeader] = {}
        self._members: dict[int, GroupMember] = {}
        try:
            for k in sorted({rank // g for rank in local}):
                ranks = set(range(k * g, min((k + 1) * g, self.group_size)))
                name = f"{series_name}/data.{k}"
                if k * g in local:
                    self._appenders[k] = ContainerWriter(container_path(self.directory, k), k)
                    if ranks - local:
                        leader = GroupLeader(name, ranks - local, cfg.rendezvous_timeout_s)
                        self._leaders[k] = leader
                        endpoint = leader.listen(cfg.bind_address, cfg.port_range)
                        write_json_atomic(appender_path(self.directory, k), {"endpoint": endpoint})
                else:
                    path = appender_path(self.directory, k)
                    self._members[k] = GroupMember.connect(
                        name,
                        lambda path=path: _appender_endpoint(path),
                        {"series": series_name, "ranks": sorted(ranks & local)},
                        cfg.rendezvous_timeout_s,
                    )
        except BaseException:
            self._shutdown()
            raise
        logger.info(
            "file writer %s: %d ranks into %d container(s), %d shared with other processes",
            series_name,
            len(self.group),
            len(self._appenders) + len(self._members),
            len(self._leaders) + len(self._members),
        )

    def _publish(
        self, announcement: StepAnnouncement, payloads: dict[int, np.ndarray]
    ) -> StepOutcome:
        if self.cfg.write_delay_ms:
            time.sleep(self.cfg.write_delay_ms / 1000)
        g = self.cfg.aggregation_group
        outcome = StepOutcome.WRITTEN
        for k in sorted({*self._appenders, *self._members}):
            own = [
                (c, payloads[i])
                for i, c in enumerate(announcement.chunk_table)
                if c.producer_rank // g == k
            ]
            part = build_announcement(
                announcement.step_index,
                announcement.datasets,
                announcement.attributes,
                (c for c, _ in own),
            )
            arrays = [arr for _, arr in own]
            member = self._members.get(k)
            if member is None:
                self._append(k, part, arrays)
                continue
            head, _ = member.submit(part.step_index, encode_part(part, arrays))
            if head.get("outcome") == DISCARDED:
                logger.warning(
                    "%s: step %d dropped by the appender", self.series_name, part.step_index
                )
                outcome = StepOutcome.DISCARDED
        return outcome

    def _append(self, k: int, part: StepAnnouncement, arrays: list[np.ndarray]) -> None:
        appender = self._appenders[k]
        leader = self._leaders.get(k)
        if leader is None:
            appender.append_step(part, arrays)
            return
        gathered = []
        try:
            gathered = leader.gather(part.step_index)
            blocks = dict(zip(part.chunk_table, arrays, strict=True))
            for p in gathered:
                if p.payloads is None:
                    msg = f"step {part.step_index}: ranks sent chunks without payloads"
                    raise DecodeError(msg)
                blocks.update(zip(p.announcement.chunk_table, p.payloads, strict=True))
            merged = merge_parts(part.step_index, [part, *(p.announcement for p in gathered)])
            appender.append_step(merged, [blocks[c] for c in merged.chunk_table])
        except Exception as exc:
            leader.reply(gathered, {"error": str(exc)})
            raise
        leader.reply(gathered, {"outcome": StepOutcome.WRITTEN.value})

    def _shutdown(self) -> None:
        # members first, so an appender never waits on a member of this very process
        for member in self._members.values():
            member.close(2 * self.cfg.close_timeout_s)
        for k, leader in self._leaders.items():
            leader.close(self.cfg.close_timeout_s)
            appender_path(self.directory, k).unlink(missing_ok=True)
        for appender in self._appenders.values():
            appender.close()


class FileReader(ReaderHandle):
    """Reads the merged steps of every container in a series directory."""

    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        local_ranks: Iterable[int] | None = None,
        *,
        recover: bool = False,
    ) -> None:
        super().__init__(series_name, group, cfg, local_ranks)
        self.directory = Path(series_name)
        paths = self._await_containers(cfg.rendezvous_timeout_s)
        self._containers = [ContainerReader(p, recover=recover) for p in paths]
        self.steps = sorted({s for c in self._containers for s in c.steps})
        self._pending = list(self.steps)
        # merged chunk index -> (container, step, chunk index inside that container)
        self._sources: list[tuple[ContainerReader, int, int]] = []
        self._blocks: dict[int, np.ndarray] = {}

    def _await_containers(self, timeout: float) -> list[Path]:
        deadline = time.monotonic() + timeout
        while True:
            if self.directory.is_dir():
                paths = list_containers(self.directory)
                if paths:
                    return paths
            if time.monotonic() >= deadline:
                msg = f"no containers under {self.directory} after {timeout}s"
                raise RendezvousTimeoutError(msg)
            time.sleep(_POLL_S)

    def _next(self) -> StepAnnouncement | None:
        if not self._pending:
            return None
        step = self._pending.pop(0)
        datasets: dict[str, DatasetDecl] = {}
        attributes: dict[str, AttributeValue] = {}
        located: list[tuple[WrittenChunk, tuple[ContainerReader, int, int]]] = []
        for container in self._containers:
            if step not in container.steps:
                continue
            part = container.announcement(step)
            for d in part.datasets:
                datasets.setdefault(d.name, d)
            for key, value in part.attributes.items():
                attributes.setdefault(key, value)
            located.extend((c, (container, step, i)) for i, c in enumerate(part.chunk_table))
        located.sort(key=lambda item: chunk_sort_key(item[0]))
        self._sources = [src for _, src in located]
        merged = build_announcement(step, datasets.values(), attributes, (c for c, _ in located))
        self._blocks.clear()
        return merged

    def _fetch(
        self, index: int, chunk: WrittenChunk, decl: DatasetDecl, part: Region, reader: int
    ) -> np.ndarray:
        block = self._blocks.get(index)
        if block is None:
            container, step, i = self._sources[index]
            raw = container.read_block(step, i)
            block = np.frombuffer(raw, dtype=decl.dtype).reshape(chunk.region.extent)
            self._blocks[index] = block
        return block[relative_slices(chunk.region, part)]

    def _release(self, step: StepAnnouncement) -> None:
        self._blocks.clear()

    def _shutdown(self) -> None:
        for c in self._containers:
            c.close()
