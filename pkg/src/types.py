"""Shared type aliases and TypedDicts for chunkstream."""

from __future__ import annotations

from typing import Literal, NotRequired, TypedDict

# ---------------------------------------------------------------------------
# Primitive aliases
# ---------------------------------------------------------------------------

type Extent = tuple[int, ...]  # cells per axis, slowest-varying axis first
type Index = tuple[int, ...]  # one cell coordinate

type Scalar = int | float | str
type AttributeValue = Scalar | tuple[int, ...] | tuple[float, ...] | tuple[str, ...]
type Attributes = dict[str, AttributeValue]

# ---------------------------------------------------------------------------
# Literals
# ---------------------------------------------------------------------------

type ElemKind = Literal["i1", "i2", "i4", "i8", "u1", "u2", "u4", "u8", "f4", "f8"]

type StrategyKind = Literal["round_robin", "hyperslabs", "binpacking", "by_hostname"]

type EngineKind = Literal["stream", "file"]

type QueuePolicy = Literal["discard", "block"]

type SampleRole = Literal["store", "load"]

# ---------------------------------------------------------------------------
# JSON document shapes
# ---------------------------------------------------------------------------


class StrategyDoc(TypedDict):
    """StrategySpec as it appears inside a config document."""

    kind: StrategyKind
    axis: NotRequired[int]
    secondary: NotRequired[StrategyDoc]
    fallback: NotRequired[StrategyDoc]


class RegionDoc(TypedDict):
    offset: list[int]
    extent: list[int]


class DatasetDoc(TypedDict):
    name: str
    elem_kind: ElemKind
    global_extent: list[int]


class ChunkDoc(TypedDict):
    dataset: str
    region: RegionDoc
    producer_rank: int
    hostname: str


class AnnouncementDoc(TypedDict):
    step_index: int
    datasets: list[DatasetDoc]
    attributes: dict[str, object]
    chunk_table: list[ChunkDoc]


class WriterEntry(TypedDict):
    """One writer rank inside a contact document."""

    rank: int
    hostname: str
    endpoint: str  # "address:port"


class ContactDoc(TypedDict):
    """Rendezvous document a stream writer publishes at ``contact_path``."""

    version: int
    series: str
    writer_group_size: int
    writers: list[WriterEntry]
    control: str


class BlockEntry(TypedDict):
    """Footer index entry locating one payload block inside a container file."""

    step: int
    chunk: int  # index into the file's own chunk table for that step
    dataset: str
    offset: list[int]
    extent: list[int]
    pos: int
    length: int


class StepEntry(TypedDict):
    step: int
    announcement_pos: int
    announcement_len: int
    blocks: list[BlockEntry]


class HostDoc(TypedDict):
    """One virtual host of a bench topology."""

    hostname: str
    writer_ranks: list[int]
    reader_ranks: list[int]


class SampleDoc(TypedDict):
    role: SampleRole
    step: int
    rank: int
    bytes: int
    seconds: float


class WorkerResultDoc(TypedDict):
    """What a bench child process leaves behind for the orchestrator."""

    role: str
    rank: int
    hostname: str
    samples: list[SampleDoc]
    produced: int
    delivered: list[int]
    discarded: int
    queue_high_water: int
