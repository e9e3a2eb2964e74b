"""Child process roles of the benchmark.

    python -m src.bench_worker --role writer --rank 0 --plan plan.json --run-dir run0
    python -m src.bench_worker --role reader --plan plan.json --run-dir run0

There is one writer process per writer rank; together they form the writer
group of the run. There is one reader process per host holding reader ranks;
together they form the reader group. A reader picks its host from
``CHUNKSTREAM_HOSTNAME`` unless ``--host`` is given. A writer leaves
``writer-<rank>.json`` in the run directory, a reader ``reader-<host>.json``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .bench import BenchPlan, Sample, synthetic_step
from .config import default_hostname, setup_logging
from .engine import StepOutcome, open_writer
from .errors import ChunkstreamError, ConfigError
from .model import volume
from .pipe import PipeSpec, SeriesEndpoint, run_pipe
from .stream import StreamWriter

if TYPE_CHECKING:
    from collections.abc import Sequence

    from .types import WorkerResultDoc

logger = logging.getLogger(__name__)


def sim_series(run_dir: Path) -> Path:
    return run_dir / "sim"


def sink_series(run_dir: Path) -> Path:
    return run_dir / "sink"


def run_writer(
    plan: BenchPlan, run_dir: Path, rank: int, until: float | None = None
) -> WorkerResultDoc:
    """Produce synthetic steps as writer ``rank`` until the wall-clock time ``until``.

    Every writer process of a run gets the same ``until`` so the group stops
    together. In ``file`` mode the writers store straight into containers,
    slowed down by ``sink_delay_ms``; in ``stream`` mode they publish to the
    stream. Only this rank's own ``begin_step``..``end_step`` is timed.
    """
    group = plan.writer_group()
    if not 0 <= rank < len(group):
        msg = f"writer rank {rank} is not in a group of {len(group)}"
        raise ConfigError(msg)
    meta = group[rank]
    if plan.mode == "file":
        cfg = plan.sink.replace(write_delay_ms=plan.sink_delay_ms)
        series = sink_series(run_dir)
    else:
        cfg = plan.engine
        series = sim_series(run_dir)
    decl, chunks = synthetic_step(plan)
    chunk = chunks[rank]
    nbytes = volume(chunk.region) * decl.width
    until = time.time() + plan.duration_s if until is None else until
    samples: list[Sample] = []
    delivered: list[int] = []
    produced = 0

    with open_writer(str(series), [meta], cfg, group_size=len(group)) as w:
        while time.time() < until:
            if plan.compute_delay_ms:
                time.sleep(plan.compute_delay_ms / 1000)
            payload = np.full(volume(chunk.region), float(produced), dtype="<f8")
            start = time.monotonic_ns()
            step = w.begin_step()
            w.put_chunk(decl, chunk.region, payload, rank=rank)
            outcome = w.end_step()
            seconds = max((time.monotonic_ns() - start) / 1e9, 1e-9)
            produced += 1
            if outcome is StepOutcome.DISCARDED:
                continue
            delivered.append(step)
            samples.append(Sample("store", step, rank, nbytes, seconds))
        high_water = w.queue.high_water if isinstance(w, StreamWriter) else 0
    print(f"writer {rank}@{meta.hostname}: {produced} steps, {len(delivered)} {cfg.engine} dumps")
    return {
        "role": "writer",
        "rank": rank,
        "hostname": meta.hostname,
        "samples": [s.to_dict() for s in samples],
        "produced": produced,
        "delivered": delivered,
        "discarded": produced - len(delivered),
        "queue_high_water": high_water,
    }


def run_reader(plan: BenchPlan, run_dir: Path, hostname: str) -> WorkerResultDoc:
    """Pipe this host's share of the stream into the shared sink series."""
    host = plan.host(hostname)
    spec = PipeSpec(
        source=SeriesEndpoint(str(sim_series(run_dir)), plan.engine),
        sinks=(
            SeriesEndpoint(
                str(sink_series(run_dir)),
                plan.sink.replace(write_delay_ms=plan.sink_delay_ms),
            ),
        ),
        group=tuple(plan.reader_group()),
        local_ranks=host.reader_ranks,
        delay_ms=plan.reader_delay_ms,
    )
    report = run_pipe(spec)
    rank = min(host.reader_ranks)
    print(f"reader@{hostname}: {report.steps_copied} steps, {report.bytes_moved} bytes")
    return {
        "role": "reader",
        "rank": rank,
        "hostname": hostname,
        "samples": [
            Sample("load", r.step, rank, r.bytes, max(r.load_s, 1e-9)).to_dict()
            for r in report.records
        ],
        "produced": 0,
        "delivered": [r.step for r in report.records],
        "discarded": 0,
        "queue_high_water": 0,
    }


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="python -m src.bench_worker")
    parser.add_argument("--role", choices=("writer", "reader"), required=True)
    parser.add_argument("--plan", type=Path, required=True)
    parser.add_argument("--run-dir", type=Path, required=True)
    parser.add_argument("--rank", type=int, default=0, help="writer rank (writer role)")
    parser.add_argument("--until", type=float, help="wall-clock stop time of the writers")
    parser.add_argument("--host", help="virtual hostname (default: $CHUNKSTREAM_HOSTNAME)")
    args = parser.parse_args(argv)
    setup_logging()

    hostname = args.host or default_hostname()
    try:
        plan = BenchPlan.load(args.plan)
        if args.role == "writer":
            result = run_writer(plan, args.run_dir, args.rank, args.until)
            out = args.run_dir / f"writer-{args.rank}.json"
        else:
            result = run_reader(plan, args.run_dir, hostname)
            out = args.run_dir / f"reader-{hostname}.json"
    except (ChunkstreamError, OSError) as exc:
        print(f"bench worker ({args.role}@{hostname}): {exc}", file=sys.stderr)
        return 1
    out.write_text(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
