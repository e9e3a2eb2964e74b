"""Copy a series step by step from one engine to one or more others.

Usage:
    chunkstream-pipe --in SIM --in-config stream.json --out capture --out-config file.json
    chunkstream-pipe --in SIM --out capture --out2 relay --out2-config stream.json

Each pipe instance loads the slabs the distribution strategy assigns to its
ranks and re-publishes them unchanged as its own chunks, so several instances
of one reader group together forward every cell exactly once. On the sink
side the instances form one writer group of the same size, each publishing
as the ranks it reads as. Writing a step to the sinks overlaps with loading
the next one.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import Future, ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING

from .config import EngineConfig, setup_logging
from .distribution import RankMeta, StrategySpec
from .engine import local_group, open_reader, open_writer
from .errors import ChunkstreamError, ConfigError

if TYPE_CHECKING:
    from collections.abc import Sequence

    import numpy as np

    from .distribution import ChunkSlab
    from .engine import WriterHandle
    from .model import StepAnnouncement

logger = logging.getLogger(__name__)

REPORT_HEADER = ("step", "bytes", "load_s", "store_s")

type _Loaded = dict[int, list[tuple[ChunkSlab, np.ndarray]]]


@dataclass(frozen=True)
class SeriesEndpoint:
    """A series name and the engine configuration used to reach it."""

    name: str
    cfg: EngineConfig = field(default_factory=EngineConfig)


@dataclass(frozen=True)
class PipeSpec:
    """What one pipe instance copies, from where, to where."""

    source: SeriesEndpoint
    sinks: tuple[SeriesEndpoint, ...]
    strategy: StrategySpec | None = None
    group: tuple[RankMeta, ...] = field(default_factory=lambda: tuple(local_group(1)))
    local_ranks: tuple[int, ...] | None = None
    delay_ms: int = 0  # extra time spent per step after loading, to emulate slow consumers

    def __post_init__(self) -> None:
        if self.delay_ms < 0:
            msg = f"delay_ms must be >= 0, got {self.delay_ms}"
            raise ConfigError(msg)
        if not self.sinks:
            msg = "a pipe needs at least one sink"
            raise ConfigError(msg)
        for sink in self.sinks:
            if sink.name == self.source.name:
                msg = f"sink {sink.name!r} is the source series"
                raise ConfigError(msg)
        names = [s.name for s in self.sinks]
        if len(set(names)) != len(names):
            msg = f"duplicate sinks: {names}"
            raise ConfigError(msg)
        known = {m.rank for m in self.group}
        if known != set(range(len(self.group))):
            msg = f"group ranks must be 0..{len(self.group) - 1}, got {sorted(known)}"
            raise ConfigError(msg)
        if self.local_ranks is not None and not set(self.local_ranks) <= known:
            msg = f"local ranks {sorted(self.local_ranks)} are not in the group {sorted(known)}"
            raise ConfigError(msg)

    @property
    def ranks(self) -> list[int]:
        """Reader ranks this instance loads and writer ranks it publishes as."""
        if self.local_ranks is not None:
            return sorted(self.local_ranks)
        return sorted(m.rank for m in self.group)


@dataclass
class StepRecord:
    step: int
    bytes: int
    load_s: float
    store_s: float = 0.0


@dataclass
class PipeReport:
    records: list[StepRecord] = field(default_factory=list)

    @property
    def steps_copied(self) -> int:
        return len(self.records)

    @property
    def bytes_moved(self) -> int:
        return sum(r.bytes for r in self.records)


def _seconds_since(start_ns: int) -> float:
    return (time.monotonic_ns() - start_ns) / 1e9


def _store(writers: Sequence[WriterHandle], step: StepAnnouncement, loaded: _Loaded) -> float:
    start = time.monotonic_ns()
    for w in writers:
        w.begin_step(step.step_index)
        for key, value in step.attributes.items():
            w.set_attribute(key, value)
        for decl in step.datasets:
            w.declare_dataset(decl)
        for rank, slabs in loaded.items():
            for slab, arr in slabs:
                decl = step.decls[step.chunk_table[slab.source].dataset]
                w.put_chunk(decl, slab.region, arr, rank=rank)
        w.end_step()
    return _seconds_since(start)


def run_pipe(spec: PipeSpec) -> PipeReport:
    """Copy every step the source delivers to every sink until end of stream.

    Raises:
        RendezvousTimeoutError: the source never showed up.
        ChunkstreamError: a sink failed; the copy is aborted.
    """
    source_cfg = spec.source.cfg
    if spec.strategy is not None:
        source_cfg = source_cfg.replace(strategy=spec.strategy)
    ranks = spec.ranks
    hosts = {m.rank: m.hostname for m in spec.group}
    sink_group = [RankMeta(r, hosts[r]) for r in ranks]
    report = PipeReport()

    with ExitStack() as stack:
        reader = stack.enter_context(
            open_reader(spec.source.name, spec.group, source_cfg, local_ranks=ranks)
        )
        writers = [
            stack.enter_context(
                open_writer(sink.name, sink_group, sink.cfg, group_size=len(spec.group))
            )
            for sink in spec.sinks
        ]
        pool = stack.enter_context(ThreadPoolExecutor(max_workers=1, thread_name_prefix="sink"))
        in_flight: tuple[StepRecord, Future[float]] | None = None
        while True:
            start = time.monotonic_ns()
            step = reader.next_step()
            if step is None:
                break
            loaded: _Loaded = {rank: reader.load_assigned(rank) for rank in ranks}
            reader.release_step()
            record = StepRecord(
                step=step.step_index,
                bytes=sum(arr.nbytes for slabs in loaded.values() for _, arr in slabs),
                load_s=_seconds_since(start),
            )
            # at most one step being stored while the next one loads
            if in_flight is not None:
                done, future = in_flight
                done.store_s = future.result()
                report.records.append(done)
            in_flight = (record, pool.submit(_store, writers, step, loaded))
            logger.debug("step %d: %d bytes loaded", record.step, record.bytes)
            if spec.delay_ms:
                time.sleep(spec.delay_ms / 1000)
        if in_flight is not None:
            done, future = in_flight
            done.store_s = future.result()
            report.records.append(done)
    logger.info("pipe copied %d steps (%d bytes)", report.steps_copied, report.bytes_moved)
    return report


def write_report_csv(report: PipeReport, path: Path) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(REPORT_HEADER)
        for r in report.records:
            w.writerow([r.step, r.bytes, f"{r.load_s:.9f}", f"{r.store_s:.9f}"])


def _parse_group(parser: argparse.ArgumentParser, text: str | None) -> tuple[RankMeta, ...]:
    if text is None:
        return tuple(local_group(1))
    try:
        doc = json.loads(text)
        return tuple(RankMeta(int(rank), str(host)) for rank, host in doc)
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        parser.error(f"--group must be a JSON list of [rank, hostname] pairs ({exc})")


def _parse_strategy(parser: argparse.ArgumentParser, text: str | None) -> StrategySpec | None:
    if text is None:
        return None
    try:
        return StrategySpec.from_dict(json.loads(text))
    except (json.JSONDecodeError, ConfigError, TypeError) as exc:
        parser.error(f"invalid --strategy: {exc}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="chunkstream-pipe", description="Copy a chunkstream series between engines."
    )
    parser.add_argument("--in", dest="source", required=True, help="source series name")
    parser.add_argument("--in-config", type=Path, help="engine config of the source")
    parser.add_argument("--out", required=True, help="sink series name")
    parser.add_argument("--out-config", type=Path, help="engine config of the sink")
    parser.add_argument("--out2", help="second sink series name (tee)")
    parser.add_argument("--out2-config", type=Path, help="engine config of the second sink")
    parser.add_argument("--strategy", help="distribution strategy as JSON")
    parser.add_argument("--report", type=Path, help="write per-step CSV report here")
    parser.add_argument("--group", help="reader group as JSON [[rank, hostname], ...]")
    parser.add_argument(
        "--rank", type=int, action="append", help="local rank of this instance (repeatable)"
    )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.out2_config is not None and args.out2 is None:
        parser.error("--out2-config requires --out2")
    setup_logging()
    group = _parse_group(parser, args.group)
    strategy = _parse_strategy(parser, args.strategy)

    try:
        sinks = [SeriesEndpoint(args.out, EngineConfig.resolve(args.out_config))]
        if args.out2 is not None:
            sinks.append(SeriesEndpoint(args.out2, EngineConfig.resolve(args.out2_config)))
        spec = PipeSpec(
            source=SeriesEndpoint(args.source, EngineConfig.resolve(args.in_config)),
            sinks=tuple(sinks),
            strategy=strategy,
            group=group,
            local_ranks=tuple(args.rank) if args.rank else None,
        )
    except ConfigError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"chunkstream-pipe: {exc}", file=sys.stderr)
        return 1

    print(f"Piping {spec.source.name} -> {', '.join(s.name for s in spec.sinks)}")
    try:
        report = run_pipe(spec)
    except (ChunkstreamError, OSError) as exc:
        print(f"chunkstream-pipe: {exc}", file=sys.stderr)
        return 1
    print(f"Copied {report.steps_copied} steps ({report.bytes_moved} bytes)")
    if args.report is not None:
        write_report_csv(report, args.report)
        print(f"Wrote report to {args.report}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
