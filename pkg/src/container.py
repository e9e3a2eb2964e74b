"""Append-only aggregate container files.

Layout (little-endian)::

    header   b"CHNKSTRM" + u16 version
    record   b"STEP" + u64 step index + encoded announcement + payload blocks
    ...
    footer   JSON index + u32 CRC32(JSON) + u64 JSON length + b"CHNKSTRM"

Each record's announcement lists only the chunks stored in this file, and the
payload blocks follow in the order of that chunk table. The footer index makes
opening O(1); :func:`scan_container` rebuilds it from the records when the
footer is missing or damaged.
"""

from __future__ import annotations

import json
import logging
import os
import struct
import threading
import zlib
from pathlib import Path
from typing import TYPE_CHECKING, BinaryIO, Self, cast

from .errors import CorruptContainerError, DecodeError
from .model import decode_announcement, encode_announcement, encoded_length, volume

if TYPE_CHECKING:
    from collections.abc import Sequence
    from types import TracebackType

    import numpy as np

    from .model import StepAnnouncement
    from .types import BlockEntry, StepEntry

logger = logging.getLogger(__name__)

MAGIC = b"CHNKSTRM"
CONTAINER_VERSION = 1

_HEADER = struct.Struct("<8sH")
_RECORD = struct.Struct("<4sQ")
_TRAILER = struct.Struct("<IQ8s")
_RECORD_TAG = b"STEP"
_PREFIX_SIZE = 12


def container_path(directory: Path, aggregate: int) -> Path:
    return directory / f"data.{aggregate}"


def list_containers(directory: Path) -> list[Path]:
    """Container files of a series directory, ordered by aggregate number."""
    found = []
    for p in directory.glob("data.*"):
        suffix = p.name.removeprefix("data.")
        if suffix.isdigit():
            found.append((int(suffix), p))
    return [p for _, p in sorted(found)]


class ContainerWriter:
    """The single appender of one aggregate file.

    Ranks sharing the file go through :meth:`append_step`, which serializes
    them and makes each step durable before returning.
    """

    def __init__(self, path: Path, aggregate: int) -> None:
        self.path = path
        self.aggregate = aggregate
        self._lock = threading.Lock()
        self._index: list[StepEntry] = []
        self._f: BinaryIO = path.open("xb")
        self._f.write(_HEADER.pack(MAGIC, CONTAINER_VERSION))
        self._sync()
        logger.info("created container %s", path)

    def _sync(self) -> None:
        self._f.flush()
        os.fsync(self._f.fileno())

    def append_step(self, announcement: StepAnnouncement, payloads: Sequence[np.ndarray]) -> None:
        """Append one step record; ``payloads`` follow the announcement's chunk table."""
        if len(payloads) != len(announcement.chunk_table):
            msg = f"{len(payloads)} payloads for {len(announcement.chunk_table)} chunks"
            raise ValueError(msg)
        encoded = encode_announcement(announcement)
        with self._lock:
            if self._index and announcement.step_index <= self._index[-1]["step"]:
                msg = f"step {announcement.step_index} after {self._index[-1]['step']}"
                raise ValueError(msg)
            f = self._f
            f.write(_RECORD.pack(_RECORD_TAG, announcement.step_index))
            ann_pos = f.tell()
            f.write(encoded)
            blocks: list[BlockEntry] = []
            for i, (chunk, arr) in enumerate(zip(announcement.chunk_table, payloads, strict=True)):
                raw = arr.tobytes()
                blocks.append(
                    {
                        "step": announcement.step_index,
                        "chunk": i,
                        "dataset": chunk.dataset,
                        "offset": list(chunk.region.offset),
                        "extent": list(chunk.region.extent),
                        "pos": f.tell(),
                        "length": len(raw),
                    }
                )
                f.write(raw)
            self._sync()
            self._index.append(
                {
                    "step": announcement.step_index,
                    "announcement_pos": ann_pos,
                    "announcement_len": len(encoded),
                    "blocks": blocks,
                }
            )

    def close(self) -> None:
        with self._lock:
            if self._f.closed:
                return
            footer = json.dumps(
                {"version": CONTAINER_VERSION, "aggregate": self.aggregate, "steps": self._index},
                sort_keys=True,
                separators=(",", ":"),
            ).encode("utf-8")
            self._f.write(footer)
            self._f.write(_TRAILER.pack(zlib.crc32(footer), len(footer), MAGIC))
            self._sync()
            self._f.close()
        logger.info("closed container %s (%d steps)", self.path, len(self._index))


def _check_header(f: BinaryIO, path: Path) -> None:
    head = f.read(_HEADER.size)
    if len(head) < _HEADER.size:
        msg = f"{path}: shorter than the container header"
        raise CorruptContainerError(msg)
    magic, version = _HEADER.unpack(head)
    if magic != MAGIC:
        msg = f"{path}: bad magic {magic!r}"
        raise CorruptContainerError(msg)
    if version != CONTAINER_VERSION:
        msg = f"{path}: container version {version}, expected {CONTAINER_VERSION}"
        raise CorruptContainerError(msg)


def read_footer(path: Path) -> list[StepEntry]:
    """Load and verify the footer index of a closed container.

    Raises:
        CorruptContainerError: bad header, trailer, checksum or index document.
    """
    with path.open("rb") as f:
        _check_header(f, path)
        size = f.seek(0, os.SEEK_END)
        if size < _HEADER.size + _TRAILER.size:
            msg = f"{path}: no footer"
            raise CorruptContainerError(msg)
        f.seek(size - _TRAILER.size)
        crc, length, magic = _TRAILER.unpack(f.read(_TRAILER.size))
        start = size - _TRAILER.size - length
        if magic != MAGIC or start < _HEADER.size:
            msg = f"{path}: footer trailer is damaged"
            raise CorruptContainerError(msg)
        f.seek(start)
        footer = f.read(length)
    if zlib.crc32(footer) != crc:
        msg = f"{path}: footer checksum mismatch"
        raise CorruptContainerError(msg)
    try:
        doc = json.loads(footer.decode("utf-8"))
        return cast("list[StepEntry]", doc["steps"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        msg = f"{path}: unreadable footer index ({exc})"
        raise CorruptContainerError(msg) from exc


def scan_container(path: Path) -> list[StepEntry]:
    """Rebuild the index by walking step records; stops at the first incomplete one."""
    entries: list[StepEntry] = []
    with path.open("rb") as f:
        _check_header(f, path)
        size = f.seek(0, os.SEEK_END)
        pos = _HEADER.size
        while pos + _RECORD.size + _PREFIX_SIZE <= size:
            f.seek(pos)
            tag, step = _RECORD.unpack(f.read(_RECORD.size))
            if tag != _RECORD_TAG:
                break
            ann_pos = pos + _RECORD.size
            try:
                ann_len = encoded_length(f.read(_PREFIX_SIZE))
                f.seek(ann_pos)
                announcement = decode_announcement(f.read(ann_len))
            except DecodeError as exc:
                logger.warning("%s: record at %d unreadable (%s)", path, pos, exc)
                break
            if announcement.step_index != step:
                logger.warning(
                    "%s: record at %d tagged %d holds step %d",
                    path,
                    pos,
                    step,
                    announcement.step_index,
                )
                break
            cursor = ann_pos + ann_len
            blocks: list[BlockEntry] = []
            decls = announcement.decls
            for i, chunk in enumerate(announcement.chunk_table):
                length = volume(chunk.region) * decls[chunk.dataset].width
                blocks.append(
                    {
                        "step": step,
                        "chunk": i,
                        "dataset": chunk.dataset,
                        "offset": list(chunk.region.offset),
                        "extent": list(chunk.region.extent),
                        "pos": cursor,
                        "length": length,
                    }
                )
                cursor += length
            if cursor > size:
                logger.warning("%s: step %d is incomplete", path, step)
                break
            entries.append(
                {
                    "step": step,
                    "announcement_pos": ann_pos,
                    "announcement_len": ann_len,
                    "blocks": blocks,
                }
            )
            pos = cursor
    logger.info("%s: recovered %d steps by scanning", path, len(entries))
    return entries


class ContainerReader:
    """Random access to the steps of one container file.

    Args:
        path: Container file.
        recover: Fall back to :func:`scan_container` if the footer is damaged.

    Raises:
        CorruptContainerError: the footer is damaged and ``recover`` is off.
    """

    def __init__(self, path: Path, *, recover: bool = False) -> None:
        self.path = path
        try:
            entries = read_footer(path)
            self.recovered = False
        except CorruptContainerError:
            if not recover:
                raise
            logger.warning("%s: footer damaged, scanning records", path)
            entries = scan_container(path)
            self.recovered = True
        self.entries = entries  # file order
        self._entries: dict[int, StepEntry] = {e["step"]: e for e in entries}
        self._f: BinaryIO = path.open("rb")

    @property
    def steps(self) -> list[int]:
        return sorted(self._entries)

    def entry(self, step: int) -> StepEntry:
        try:
            return self._entries[step]
        except KeyError:
            msg = f"{self.path}: no step {step}"
            raise KeyError(msg) from None

    def _read(self, pos: int, length: int) -> bytes:
        self._f.seek(pos)
        data = self._f.read(length)
        if len(data) != length:
            msg = f"{self.path}: short read at {pos} ({len(data)} of {length} bytes)"
            raise CorruptContainerError(msg)
        return data

    def announcement(self, step: int) -> StepAnnouncement:
        e = self.entry(step)
        try:
            return decode_announcement(self._read(e["announcement_pos"], e["announcement_len"]))
        except DecodeError as exc:
            msg = f"{self.path}: step {step} announcement unreadable ({exc})"
            raise CorruptContainerError(msg) from exc

    def read_block(self, step: int, chunk: int) -> bytes:
        block = self.entry(step)["blocks"][chunk]
        return self._read(block["pos"], block["length"])

    def close(self) -> None:
        self._f.close()

    def __enter__(self) -> Self:
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc: BaseException | None,
        tb: TracebackType | None,
    ) -> None:
        self.close()

