"""Desk-scale throughput benchmark for the file and stream engines.

Usage:
    chunkstream-bench --plan plan.json --out results/

A plan runs either ``file`` (writers store straight into containers) or
``stream`` (writers publish to a stream; one pipe process per virtual host
forwards its share into one shared container series). Each repetition spawns
one process per writer rank and one per reader host, each with
``CHUNKSTREAM_HOSTNAME`` set to its host. It runs for ``duration_s`` and
leaves ``samples.csv`` and ``summary.json`` behind. A step counts as a dump
only when the bytes that reached the readers (or the files, in ``file``
mode) add up to every writer's share.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from collections import defaultdict
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal, cast

import numpy as np

from .config import HOSTNAME_ENV, EngineConfig, setup_logging
from .distribution import (
    RankMeta,
    StrategySpec,
    assign,
    connection_pairs,
    imbalance,
)
from .errors import ConfigError
from .model import DatasetDecl, Region, WrittenChunk, volume

if TYPE_CHECKING:
    from collections.abc import Iterable, Mapping, Sequence

    from .types import HostDoc, SampleDoc, SampleRole, WorkerResultDoc

logger = logging.getLogger(__name__)

type BenchMode = Literal["file", "stream"]

MIB = 1 << 20
DATASET_NAME = "particles/e/position/x"
SAMPLES_HEADER = ("role", "step", "rank", "bytes", "seconds")
_WORKER_GRACE_S = 30.0

DEFAULT_SWEEP = (
    StrategySpec(
        "by_hostname", secondary=StrategySpec("binpacking"), fallback=StrategySpec("binpacking")
    ),
    StrategySpec("binpacking"),
    StrategySpec("hyperslabs"),
)


# ---------------------------------------------------------------------------
# Plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HostSpec:
    """A virtual host and the writer and reader ranks placed on it."""

    hostname: str
    writer_ranks: tuple[int, ...] = ()
    reader_ranks: tuple[int, ...] = ()

    def to_dict(self) -> HostDoc:
        return {
            "hostname": self.hostname,
            "writer_ranks": list(self.writer_ranks),
            "reader_ranks": list(self.reader_ranks),
        }

    @classmethod
    def from_dict(cls, doc: HostDoc) -> HostSpec:
        return cls(
            doc["hostname"],
            tuple(doc.get("writer_ranks", ())),
            tuple(doc.get("reader_ranks", ())),
        )


def _default_stream() -> EngineConfig:
    return EngineConfig(engine="stream", queue_policy="discard")


def _default_sink() -> EngineConfig:
    return EngineConfig(engine="file")


@dataclass(frozen=True)
class BenchPlan:
    """Everything one benchmark needs; defaults are the desk-scale setup."""

    writers: int = 6
    readers: int = 1
    bytes_per_writer_per_step: int = 64 * MIB
    compute_delay_ms: int = 0
    duration_s: int = 60
    mode: BenchMode = "stream"
    topology: tuple[HostSpec, ...] = ()
    engine: EngineConfig = field(default_factory=_default_stream)
    sink: EngineConfig = field(default_factory=_default_sink)
    sink_delay_ms: int = 0
    reader_delay_ms: int = 0
    repetitions: int = 3
    strategy_sweep: tuple[StrategySpec, ...] = DEFAULT_SWEEP

    def __post_init__(self) -> None:
        if self.writers < 1 or self.readers < 1:
            msg = f"need at least one writer and one reader, got {self.writers}/{self.readers}"
            raise ConfigError(msg)
        if self.duration_s < 1:
            msg = f"duration_s must be >= 1, got {self.duration_s}"
            raise ConfigError(msg)
        if self.repetitions < 1:
            msg = f"repetitions must be >= 1, got {self.repetitions}"
            raise ConfigError(msg)
        if self.bytes_per_writer_per_step < 8 or self.bytes_per_writer_per_step % 8:
            msg = (
                "bytes_per_writer_per_step must be a positive multiple of 8, "
                f"got {self.bytes_per_writer_per_step}"
            )
            raise ConfigError(msg)
        if min(self.compute_delay_ms, self.sink_delay_ms, self.reader_delay_ms) < 0:
            msg = "delays must be >= 0"
            raise ConfigError(msg)
        if self.mode not in ("file", "stream"):
            msg = f"mode must be 'file' or 'stream', got {self.mode!r}"
            raise ConfigError(msg)
        if self.engine.engine != "stream" or self.sink.engine != "file":
            msg = "plan engine must be a stream config and sink a file config"
            raise ConfigError(msg)
        hosts = [h.hostname for h in self.hosts]
        if len(set(hosts)) != len(hosts):
            msg = f"duplicate hostnames in topology: {hosts}"
            raise ConfigError(msg)
        placed_w = sorted(r for h in self.hosts for r in h.writer_ranks)
        placed_r = sorted(r for h in self.hosts for r in h.reader_ranks)
        if placed_w != list(range(self.writers)) or placed_r != list(range(self.readers)):
            msg = "topology must place every writer and reader rank exactly once"
            raise ConfigError(msg)

    @property
    def hosts(self) -> tuple[HostSpec, ...]:
        if self.topology:
            return self.topology
        return (HostSpec("node0", tuple(range(self.writers)), tuple(range(self.readers))),)

    def writer_group(self) -> list[RankMeta]:
        return sorted(
            (RankMeta(r, h.hostname) for h in self.hosts for r in h.writer_ranks),
            key=lambda m: m.rank,
        )

    def reader_group(self) -> list[RankMeta]:
        return sorted(
            (RankMeta(r, h.hostname) for h in self.hosts for r in h.reader_ranks),
            key=lambda m: m.rank,
        )

    def host(self, hostname: str) -> HostSpec:
        for h in self.hosts:
            if h.hostname == hostname:
                return h
        msg = f"host {hostname!r} is not part of the plan topology"
        raise ConfigError(msg)

    @property
    def cells_per_writer(self) -> int:
        return self.bytes_per_writer_per_step // 8

    def to_dict(self) -> dict[str, Any]:
        doc: dict[str, Any] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "topology":
                value = [h.to_dict() for h in value]
            elif f.name == "strategy_sweep":
                value = [s.to_dict() for s in value]
            elif isinstance(value, EngineConfig):
                value = value.to_dict()
            doc[f.name] = value
        return doc

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> BenchPlan:
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            msg = f"unknown bench plan keys: {sorted(unknown)}"
            raise ConfigError(msg)
        kwargs = dict(doc)
        if "topology" in kwargs:
            kwargs["topology"] = tuple(HostSpec.from_dict(h) for h in kwargs["topology"])
        if "strategy_sweep" in kwargs:
            kwargs["strategy_sweep"] = tuple(
                StrategySpec.from_dict(s) for s in kwargs["strategy_sweep"]
            )
        if "engine" in kwargs:
            kwargs["engine"] = EngineConfig.from_dict({"engine": "stream", **kwargs["engine"]})
        if "sink" in kwargs:
            kwargs["sink"] = EngineConfig.from_dict({"engine": "file", **kwargs["sink"]})
        try:
            return cls(**kwargs)
        except (TypeError, KeyError) as exc:
            msg = f"invalid bench plan: {exc}"
            raise ConfigError(msg) from exc

    @classmethod
    def load(cls, path: Path) -> BenchPlan:
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            msg = f"{path}: not valid JSON ({exc})"
            raise ConfigError(msg) from exc
        return cls.from_dict(doc)


def synthetic_step(plan: BenchPlan) -> tuple[DatasetDecl, list[WrittenChunk]]:
    """The 1-D dataset every writer rank contributes one equal chunk to."""
    cells = plan.cells_per_writer
    decl = DatasetDecl(DATASET_NAME, "f8", (cells * plan.writers,))
    chunks = [
        WrittenChunk(DATASET_NAME, Region((m.rank * cells,), (cells,)), m.rank, m.hostname)
        for m in plan.writer_group()
    ]
    return decl, chunks


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class Sample:
    """One rank's store or load of one dump, timed request to completion."""

    role: SampleRole
    step: int
    rank: int
    bytes: int
    seconds: float

    def __post_init__(self) -> None:
        if self.seconds <= 0:
            msg = f"sample duration must be > 0, got {self.seconds}"
            raise ValueError(msg)

    def to_dict(self) -> SampleDoc:
        return {
            "role": self.role,
            "step": self.step,
            "rank": self.rank,
            "bytes": self.bytes,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, doc: SampleDoc) -> Sample:
        return cls(doc["role"], doc["step"], doc["rank"], doc["bytes"], doc["seconds"])


def perceived_throughput(samples: Iterable[Sample]) -> float:
    """Bytes of one dump divided by the slowest rank's time for it.

    Raises:
        ValueError: no samples.
    """
    per_rank: dict[int, float] = defaultdict(float)
    total = 0
    for s in samples:
        per_rank[s.rank] += s.seconds
        total += s.bytes
    if not per_rank:
        msg = "perceived throughput of an empty dump"
        raise ValueError(msg)
    return total / max(per_rank.values())


def dump_throughputs(samples: Iterable[Sample]) -> dict[int, tuple[float, int]]:
    """Per step: ``(perceived throughput, bytes)``."""
    by_step: dict[int, list[Sample]] = defaultdict(list)
    for s in samples:
        by_step[s.step].append(s)
    return {
        step: (perceived_throughput(group), sum(s.bytes for s in group))
        for step, group in sorted(by_step.items())
    }


def mean_throughput(samples: Iterable[Sample], *, weighted: bool = False) -> float:
    """Average per-dump perceived throughput.

    With ``weighted`` each dump counts in proportion to the bytes it moved.
    """
    dumps = dump_throughputs(samples)
    if not dumps:
        msg = "mean throughput of no dumps"
        raise ValueError(msg)
    if weighted:
        total = sum(b for _, b in dumps.values())
        return sum(tp * b for tp, b in dumps.values()) / total
    return float(np.mean([tp for tp, _ in dumps.values()]))


@dataclass(frozen=True)
class WhiskerStats:
    median: float
    q1: float
    q3: float
    upper_whisker: float
    lower_whisker: float
    outliers: tuple[float, ...]

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1

    def to_dict(self) -> dict[str, Any]:
        return {
            "median": self.median,
            "q1": self.q1,
            "q3": self.q3,
            "upper_whisker": self.upper_whisker,
            "lower_whisker": self.lower_whisker,
            "outliers": list(self.outliers),
        }


def whisker_stats(values: Sequence[float]) -> WhiskerStats:
    """Box-plot statistics with linear-interpolation quartiles and 1.5 IQR whiskers.

    Raises:
        ValueError: no values.
    """
    if not values:
        msg = "whisker statistics of no values"
        raise ValueError(msg)
    arr = np.asarray(values, dtype=float)
    q1, median, q3 = (float(v) for v in np.percentile(arr, [25, 50, 75]))
    iqr = q3 - q1
    upper_fence = q3 + 1.5 * iqr
    lower_fence = q1 - 1.5 * iqr
    inside = arr[(arr >= lower_fence) & (arr <= upper_fence)]
    outliers = np.sort(arr[(arr < lower_fence) | (arr > upper_fence)])
    return WhiskerStats(
        median=median,
        q1=q1,
        q3=q3,
        upper_whisker=float(inside.max()),
        lower_whisker=float(inside.min()),
        outliers=tuple(float(v) for v in outliers),
    )


def _role_summary(samples: Sequence[Sample]) -> dict[str, Any] | None:
    if not samples:
        return None
    dumps = dump_throughputs(samples)
    return {
        "dumps": len(dumps),
        "bytes": sum(b for _, b in dumps.values()),
        "mean_throughput_unweighted": mean_throughput(samples),
        "mean_throughput_weighted": mean_throughput(samples, weighted=True),
        "whiskers": whisker_stats([tp for tp, _ in dumps.values()]).to_dict(),
    }


# ---------------------------------------------------------------------------
# Strategy comparison
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StrategyRow:
    strategy: str
    imbalance: float
    connections: int
    max_partners: int  # most writers any single reader talks to
    intra_host: float  # share of assigned bytes that stay on their host

    def to_dict(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "imbalance": self.imbalance,
            "connections": self.connections,
            "max_partners": self.max_partners,
            "intra_host": self.intra_host,
        }


def compare_strategies(
    plan: BenchPlan, strategies: Sequence[StrategySpec] | None = None
) -> list[StrategyRow]:
    """Imbalance and connection counts of each strategy on the plan's synthetic step."""
    decl, chunks = synthetic_step(plan)
    readers = plan.reader_group()
    hosts = {m.rank: m.hostname for m in readers}
    rows = []
    for spec in strategies or plan.strategy_sweep:
        a = assign(spec, chunks, readers, [decl])
        pairs = connection_pairs(a, chunks)
        partners: dict[int, int] = defaultdict(int)
        for _, reader in pairs:
            partners[reader] += 1
        total = local = 0
        for rank, slabs in a.per_reader.items():
            for s in slabs:
                n = volume(s.region)
                total += n
                if chunks[s.source].hostname == hosts[rank]:
                    local += n
        rows.append(
            StrategyRow(
                strategy=spec.describe(),
                imbalance=imbalance(a, chunks, [decl]),
                connections=len(pairs),
                max_partners=max(partners.values(), default=0),
                intra_host=local / total if total else 1.0,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# Orchestration
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    index: int
    samples: list[Sample] = field(default_factory=list)
    produced: int = 0
    dumps: int = 0
    discarded: int = 0
    queue_high_water: int = 0
    errors: list[str] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return bool(self.errors)

    def summary(self) -> dict[str, Any]:
        return {
            "run": self.index,
            "failed": self.failed,
            "errors": self.errors,
            "produced": self.produced,
            "dumps": self.dumps,
            "discarded": self.discarded,
            "queue_high_water": self.queue_high_water,
            "store": _role_summary([s for s in self.samples if s.role == "store"]),
            "load": _role_summary([s for s in self.samples if s.role == "load"]),
        }


@dataclass
class BenchReport:
    plan: BenchPlan
    runs: list[RunResult] = field(default_factory=list)
    strategies: list[StrategyRow] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return any(r.failed for r in self.runs)

    def summary(self) -> dict[str, Any]:
        return {
            "plan": self.plan.to_dict(),
            "failed": self.failed,
            "runs": [r.summary() for r in self.runs],
            "strategies": [row.to_dict() for row in self.strategies],
        }


def _worker_env(hostname: str) -> dict[str, str]:
    env = os.environ.copy()
    env[HOSTNAME_ENV] = hostname
    root = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = os.pathsep.join(p for p in (root, env.get("PYTHONPATH")) if p)
    return env


def _spawn(
    name: str, hostname: str, plan_path: Path, run_dir: Path, *args: str
) -> subprocess.Popen[bytes]:
    log = (run_dir / f"{name}.log").open("wb")
    try:
        return subprocess.Popen(
            [
                sys.executable,
                "-m",
                "src.bench_worker",
                "--plan",
                str(plan_path),
                "--run-dir",
                str(run_dir),
                *args,
            ],
            stdout=log,
            stderr=subprocess.STDOUT,
            env=_worker_env(hostname),
        )
    finally:
        log.close()


def _wait(name: str, proc: subprocess.Popen[bytes], timeout: float, errors: list[str]) -> None:
    try:
        code = proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        proc.kill()
        proc.wait()
        errors.append(f"{name} timed out after {timeout:.0f}s")
        return
    if code != 0:
        errors.append(f"{name} exited with code {code}")


def conserved_dumps(samples: Iterable[Sample], role: SampleRole, expected: int) -> list[int]:
    """Steps whose ``role`` samples, summed over every rank and host, move ``expected`` bytes."""
    per_step: dict[int, int] = defaultdict(int)
    for s in samples:
        if s.role == role:
            per_step[s.step] += s.bytes
    return sorted(step for step, n in per_step.items() if n == expected)


def _run_once(plan: BenchPlan, plan_path: Path, run_dir: Path, index: int) -> RunResult:
    run_dir.mkdir(parents=True, exist_ok=True)
    result = RunResult(index)
    readers: dict[str, subprocess.Popen[bytes]] = {}
    if plan.mode == "stream":
        for h in plan.hosts:
            if h.reader_ranks:
                readers[f"reader@{h.hostname}"] = _spawn(
                    f"reader-{h.hostname}", h.hostname, plan_path, run_dir, "--role", "reader"
                )
    # one shared stop time, so the writer group ends at the same step everywhere
    until = time.time() + plan.duration_s
    writers = {
        f"writer {m.rank}@{m.hostname}": _spawn(
            f"writer-{m.rank}",
            m.hostname,
            plan_path,
            run_dir,
            "--role",
            "writer",
            "--rank",
            str(m.rank),
            "--until",
            f"{until:.6f}",
        )
        for m in plan.writer_group()
    }

    budget = plan.duration_s + plan.engine.close_timeout_s + _WORKER_GRACE_S
    for name, proc in writers.items():
        _wait(name, proc, budget, result.errors)
    for name, proc in readers.items():
        _wait(name, proc, _WORKER_GRACE_S + plan.engine.close_timeout_s, result.errors)

    for path in sorted([*run_dir.glob("writer-*.json"), *run_dir.glob("reader-*.json")]):
        try:
            doc = cast("WorkerResultDoc", json.loads(path.read_text()))
            result.samples.extend(Sample.from_dict(s) for s in doc["samples"])
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            result.errors.append(f"{path.name}: unreadable result ({exc})")
            continue
        if doc["role"] == "writer" and doc["rank"] == 0:
            result.produced = doc["produced"]
            result.discarded = doc["discarded"]
            result.queue_high_water = doc["queue_high_water"]
    # a dump counts once every writer's bytes arrived where the run sends them
    role: SampleRole = "load" if plan.mode == "stream" else "store"
    expected = plan.writers * plan.bytes_per_writer_per_step
    result.dumps = len(conserved_dumps(result.samples, role, expected))
    return result


def write_samples_csv(samples: Iterable[Sample], path: Path) -> None:
    with path.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SAMPLES_HEADER)
        for s in samples:
            w.writerow([s.role, s.step, s.rank, s.bytes, f"{s.seconds:.9f}"])


def run_bench(plan: BenchPlan, out_dir: Path) -> BenchReport:
    """Run every repetition of ``plan`` and write the results under ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    plan_path = out_dir / "plan.json"
    plan_path.write_text(json.dumps(plan.to_dict(), indent=2))
    report = BenchReport(plan, strategies=compare_strategies(plan))

    for k in range(plan.repetitions):
        print(f"Run {k + 1}/{plan.repetitions} ({plan.mode}, {plan.duration_s}s)...")
        run_dir = out_dir / f"run{k}"
        result = _run_once(plan, plan_path, run_dir, k)
        write_samples_csv(result.samples, run_dir / "samples.csv")
        report.runs.append(result)
        status = "FAILED" if result.failed else "ok"
        print(f"  {result.dumps} dumps of {result.produced} produced [{status}]")
        for err in result.errors:
            print(f"  ERROR: {err}")

    write_samples_csv((s for r in report.runs for s in r.samples), out_dir / "samples.csv")
    (out_dir / "summary.json").write_text(json.dumps(report.summary(), indent=2))
    return report


def main(argv: Sequence[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="chunkstream-bench", description="Run a chunkstream throughput benchmark."
    )
    parser.add_argument("--plan", type=Path, required=True, help="bench plan JSON")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    args = parser.parse_args(argv)
    setup_logging()
    try:
        plan = BenchPlan.load(args.plan)
    except ConfigError as exc:
        parser.error(str(exc))
    except OSError as exc:
        print(f"chunkstream-bench: {exc}", file=sys.stderr)
        return 1

    report = run_bench(plan, args.out)
    print("\nStrategy comparison:")
    for row in report.strategies:
        print(
            f"  {row.strategy:<40} imbalance={row.imbalance:.3f} "
            f"connections={row.connections} intra_host={row.intra_host:.2f}"
        )
    print(f"\nWrote {args.out / 'samples.csv'} and {args.out / 'summary.json'}")
    return 1 if report.failed else 0


if __name__ == "__main__":
    sys.exit(main())
