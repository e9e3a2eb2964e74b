"""Staging stream engine over loopback/TCP sockets.

The writer binds a control endpoint (registrations, announcements, releases)
and one data endpoint per writer rank, publishes them in a contact document,
and serves chunk requests from background threads while the application keeps
computing. Readers rendezvous through the contact document, subscribe on the
control endpoint and open data connections lazily, only to the writer ranks
whose chunks they actually read.

A writer group may span processes. The process hosting rank 0 leads: it owns
the control endpoint, the contact document and the staging queue. The others
join it on the control endpoint, publish their data endpoints through it and
hand over the chunk tables of their steps; their payloads never leave them.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import threading
import time
from typing import TYPE_CHECKING, Any, cast

import numpy as np

from .engine import ReaderHandle, StepOutcome, WriterHandle
from .errors import (
    BindError,
    ChunkstreamError,
    ConnectionLostError,
    DecodeError,
    RendezvousTimeoutError,
    UnavailableRegionError,
    VersionMismatchError,
)
from .geometry import contains
from .group import GroupLeader, GroupMember, encode_part, merge_parts, remap_payloads
from .model import Region, decode_announcement, encode_announcement, volume
from .step_queue import StagedStep, StepQueue
from .utils import extract, write_json_atomic
from .wire import (
    FramedSocket,
    MessageKind,
    bind_listener,
    decode_data,
    encode_data,
    endpoint_of,
    parse_json,
    split_endpoint,
)

if TYPE_CHECKING:
    from collections.abc import Callable, Iterable, Sequence
    from pathlib import Path

    from .config import EngineConfig
    from .distribution import RankMeta
    from .group import Part
    from .model import DatasetDecl, StepAnnouncement, WrittenChunk
    from .types import ContactDoc, WriterEntry

logger = logging.getLogger(__name__)

CONTACT_VERSION = 1

_ACCEPT_POLL_S = 0.2
_RENDEZVOUS_POLL_S = 0.05


def read_contact(path: Path) -> ContactDoc:
    """Parse a contact document, complete or still filling up.

    Raises:
        DecodeError: not a contact document.
        VersionMismatchError: written by an incompatible version.
    """
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        msg = f"{path}: not valid JSON ({exc})"
        raise DecodeError(msg) from exc
    if not isinstance(doc, dict) or "version" not in doc:
        msg = f"{path}: not a contact document"
        raise DecodeError(msg)
    if doc["version"] != CONTACT_VERSION:
        msg = f"{path}: contact version {doc['version']}, expected {CONTACT_VERSION}"
        raise VersionMismatchError(msg)
    ranks = [w["rank"] for w in doc["writers"]]
    if ranks != sorted(set(ranks)) or not set(ranks) <= set(range(doc["writer_group_size"])):
        msg = f"{path}: writer ranks {ranks} do not fit a group of {doc['writer_group_size']}"
        raise DecodeError(msg)
    return cast("ContactDoc", doc)


def contact_complete(doc: ContactDoc) -> bool:
    """Every writer rank of the group has published its data endpoint."""
    return len(doc["writers"]) == doc["writer_group_size"]


class StreamWriter(WriterHandle):
    """Writer side of the stream engine.

    ``end_step`` stages the step in a bounded :class:`StepQueue` and announces
    it to every subscriber; it never waits for readers unless the queue policy
    is ``block`` and the queue is full. In a group spanning processes, the
    leader's ``end_step`` also waits for the other processes' share of the
    step, and theirs wait for the leader's verdict.
    """

    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        *,
        group_size: int | None = None,
    ) -> None:
        super().__init__(series_name, group, cfg, group_size=group_size)
        self.is_leader = self.group[0].rank == 0
        self.queue = StepQueue(cfg.queue_depth, cfg.queue_policy, on_free=self._freed)
        self._stop = threading.Event()
        self._announce_lock = threading.Lock()
        self._subscribers: dict[int, FramedSocket] = {}
        self._next_sub = 0
        self._closing = False
        self._threads: list[threading.Thread] = []
        self._conns: list[FramedSocket] = []
        self._conns_lock = threading.Lock()
        self._listeners: list[socket.socket] = []
        # members only: steps of ours the leader published, and steps awaiting its verdict
        self._cond = threading.Condition()
        self._staged: dict[int, StagedStep] = {}
        self._unmapped: dict[int, tuple[StepAnnouncement, dict[int, np.ndarray]]] = {}
        self._group: GroupLeader | None = None
        self._member: GroupMember | None = None
        self.contact_path = cfg.contact_file(series_name)

        self._data: dict[int, socket.socket] = {}
        try:
            if self.is_leader:
                self._control = bind_listener(cfg.bind_address, cfg.port_range)
                self._listeners.append(self._control)
            for meta in self.group:
                self._data[meta.rank] = bind_listener(cfg.bind_address, cfg.port_range)
                self._listeners.append(self._data[meta.rank])
        except BindError:
            for s in self._listeners:
                s.close()
            raise
        self._slots = {
            rank: threading.BoundedSemaphore(cfg.max_connections) for rank in self._data
        }

        if self.is_leader:
            self._spawn(self._accept_loop, self._control, None)
        for rank, sock in self._data.items():
            self._spawn(self._accept_loop, sock, rank)

        entries: list[WriterEntry] = [
            {"rank": m.rank, "hostname": m.hostname, "endpoint": endpoint_of(self._data[m.rank])}
            for m in self.group
        ]
        try:
            if self.is_leader:
                self._writers = entries
                remote = set(range(self.group_size)) - set(self._hosts)
                if remote:
                    self._group = GroupLeader(
                        series_name, remote, cfg.rendezvous_timeout_s, on_join=self._joined
                    )
                self._write_contact()
                logger.info(
                    "stream writer %s listening on %s", series_name, endpoint_of(self._control)
                )
            else:
                self._member = GroupMember.connect(
                    series_name,
                    self._locate_leader,
                    {"series": series_name, "ranks": sorted(self._hosts), "writers": entries},
                    cfg.rendezvous_timeout_s,
                    on_release=self._forget,
                )
        except (OSError, ChunkstreamError):
            self._teardown()
            raise

    def _spawn(self, target: Callable[..., None], *args: object) -> None:
        t = threading.Thread(target=target, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    # -- group membership ----------------------------------------------------

    def _write_contact(self) -> None:
        doc: ContactDoc = {
            "version": CONTACT_VERSION,
            "series": self.series_name,
            "writer_group_size": self.group_size,
            "writers": sorted(self._writers, key=lambda e: e["rank"]),
            "control": endpoint_of(self._control),
        }
        write_json_atomic(self.contact_path, doc)

    def _joined(self, hello: dict[str, Any]) -> None:
        self._writers.extend(cast("list[WriterEntry]", hello["writers"]))
        self._write_contact()

    def _locate_leader(self) -> str:
        return read_contact(self.contact_path)["control"]

    def _freed(self, steps: list[int]) -> None:
        if self._group is not None:
            for step in steps:
                self._group.broadcast(MessageKind.RELEASE, {"step": step})

    def _forget(self, step: int) -> None:
        with self._cond:
            self._staged.pop(step, None)
            self._unmapped.pop(step, None)
            self._cond.notify_all()

    # -- service threads -----------------------------------------------------

    def _accept_loop(self, listener: socket.socket, rank: int | None) -> None:
        listener.settimeout(_ACCEPT_POLL_S)
        while not self._stop.is_set():
            if rank is not None:
                # backpressure: stop accepting while the endpoint is saturated
                if not self._slots[rank].acquire(timeout=_ACCEPT_POLL_S):
                    continue
            try:
                conn, _ = listener.accept()
            except TimeoutError:
                if rank is not None:
                    self._slots[rank].release()
                continue
            except OSError:
                if rank is not None:
                    self._slots[rank].release()
                break
            conn.settimeout(None)
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            fs = FramedSocket(conn)
            with self._conns_lock:
                self._conns.append(fs)
            if rank is None:
                self._spawn(self._serve_control, fs)
            else:
                self._spawn(self._serve_data, fs, rank)

    def _serve_control(self, fs: FramedSocket) -> None:
        try:
            frame = fs.recv()
            if frame is None or frame.kind not in (MessageKind.REGISTER, MessageKind.JOIN):
                fs.close()
                return
            hello = parse_json(frame.payload)
        except ChunkstreamError as exc:
            logger.warning("bad registration: %s", exc)
            fs.close()
            return
        if frame.kind == MessageKind.JOIN:
            if self._group is not None:
                self._group.serve(fs, hello)
                return
            try:
                fs.send_json(MessageKind.JOIN, {"error": "the writer group is complete"})
            except ConnectionLostError:
                pass
            fs.close()
            return
        with self._announce_lock:
            if self._closing:
                fs.send(MessageKind.CLOSE)
                fs.close()
                return
            sub = self._next_sub
            self._next_sub += 1
            self._subscribers[sub] = fs
            backlog = self.queue.add_subscriber(sub)
            try:
                fs.send_json(
                    MessageKind.REGISTER,
                    {
                        "subscriber": sub,
                        "series": self.series_name,
                        "writer_group_size": self.group_size,
                    },
                )
                for staged in backlog:
                    fs.send(MessageKind.ANNOUNCE, encode_announcement(staged.announcement))
            except ConnectionLostError:
                logger.warning("subscriber %d vanished during registration", sub)
        logger.info(
            "subscriber %d registered (reader group of %s), %d queued steps",
            sub,
            len(hello.get("group", [])),
            len(backlog),
        )
        try:
            while (frame := fs.recv()) is not None:
                if frame.kind == MessageKind.RELEASE:
                    step = parse_json(frame.payload)["step"]
                    logger.debug("subscriber %d released step %d", sub, step)
                    self.queue.release(step, sub)
                elif frame.kind == MessageKind.CLOSE:
                    break
        except ChunkstreamError as exc:
            logger.warning("subscriber %d: %s", sub, exc)
        finally:
            self._drop_subscriber(sub)

    def _drop_subscriber(self, sub: int) -> None:
        with self._announce_lock:
            if self._subscribers.pop(sub, None) is None:
                return
            self.queue.remove_subscriber(sub)
        logger.info("subscriber %d left", sub)

    def _serve_data(self, fs: FramedSocket, rank: int) -> None:
        try:
            while (frame := fs.recv()) is not None:
                if frame.kind == MessageKind.REQUEST:
                    fs.send(MessageKind.DATA, self._answer(parse_json(frame.payload), rank))
                elif frame.kind == MessageKind.RELEASE:
                    logger.debug("rank %d: data released for %s", rank, frame.payload)
                elif frame.kind == MessageKind.CLOSE:
                    break
        except ChunkstreamError as exc:
            if not self._stop.is_set():
                logger.warning("rank %d data connection: %s", rank, exc)
        finally:
            fs.close()
            self._slots[rank].release()

    def _answer(self, request: dict[str, Any], rank: int) -> bytes:
        try:
            step = int(request["step"])
            index = int(request["chunk"])
            part = Region(
                tuple(int(v) for v in request["offset"]),
                tuple(int(v) for v in request["extent"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            logger.warning("rank %d: malformed request %s: %s", rank, request, exc)
            return encode_data({"error": f"malformed request: {exc}"}, b"")
        head = {
            "step": step,
            "chunk": index,
            "offset": list(part.offset),
            "extent": list(part.extent),
        }
        staged = self._lookup(step)
        if staged is None:
            return encode_data(head | {"error": f"step {step} is no longer staged"}, b"")
        table = staged.announcement.chunk_table
        if not 0 <= index < len(table) or table[index].producer_rank != rank:
            return encode_data(head | {"error": f"rank {rank} holds no chunk {index}"}, b"")
        chunk = table[index]
        if not contains(chunk.region, part):
            return encode_data(head | {"error": f"{part} is not inside {chunk.region}"}, b"")
        return encode_data(head, extract(staged.payloads[index], chunk.region, part))

    def _lookup(self, step: int) -> StagedStep | None:
        if self.is_leader:
            return self.queue.lookup(step)
        deadline = time.monotonic() + self.cfg.close_timeout_s
        with self._cond:
            # a reader may ask before the leader's verdict reached us
            while step in self._unmapped:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    break
                self._cond.wait(remaining)
            return self._staged.get(step)

    # -- application side ----------------------------------------------------

    def _publish(
        self, announcement: StepAnnouncement, payloads: dict[int, np.ndarray]
    ) -> StepOutcome:
        if self._member is not None:
            return self._contribute(self._member, announcement, payloads)
        parts: list[Part] = []
        try:
            if self._group is not None:
                parts = self._group.gather(announcement.step_index)
                merged = merge_parts(
                    announcement.step_index, [announcement, *(p.announcement for p in parts)]
                )
                payloads = remap_payloads(announcement, merged, payloads)
                announcement = merged
            staged = StagedStep(announcement, payloads)
            accepted = self.queue.stage(staged)
        except Exception as exc:
            if self._group is not None:
                self._group.reply(parts, {"error": str(exc)})
            raise
        outcome = StepOutcome.PUBLISHED if accepted else StepOutcome.DISCARDED
        if self._group is not None:
            raw = encode_announcement(announcement) if accepted else b""
            self._group.reply(parts, {"outcome": outcome.value}, raw)
        if not accepted:
            return outcome
        encoded = encode_announcement(announcement)
        dead: list[int] = []
        with self._announce_lock:
            for sub in sorted(self.queue.announce_targets(staged.index)):
                try:
                    self._subscribers[sub].send(MessageKind.ANNOUNCE, encoded)
                except (ConnectionLostError, KeyError):
                    dead.append(sub)
        for sub in dead:
            self._drop_subscriber(sub)
        return outcome

    def _contribute(
        self,
        member: GroupMember,
        announcement: StepAnnouncement,
        payloads: dict[int, np.ndarray],
    ) -> StepOutcome:
        step = announcement.step_index
        with self._cond:
            self._unmapped[step] = (announcement, payloads)
        try:
            head, raw = member.submit(step, encode_part(announcement))
            outcome = StepOutcome(head["outcome"])
            with self._cond:
                if self._unmapped.pop(step, None) is not None and outcome is StepOutcome.PUBLISHED:
                    merged = decode_announcement(raw)
                    self._staged[step] = StagedStep(
                        merged, remap_payloads(announcement, merged, payloads)
                    )
                self._cond.notify_all()
        except BaseException:
            with self._cond:
                self._unmapped.pop(step, None)
                self._cond.notify_all()
            raise
        return outcome

    def _shutdown(self) -> None:
        if self._member is not None:
            # keep serving our payloads until the leader's readers are done
            self._member.close(2 * self.cfg.close_timeout_s)
            with self._cond:
                self._staged.clear()
            self._teardown()
            logger.info("stream writer %s (ranks %s) closed", self.series_name, sorted(self._hosts))
            return
        with self._announce_lock:
            self._closing = True
        if not self.queue.wait_drained(self.cfg.close_timeout_s):
            logger.warning(
                "%s: readers did not release every step within %ss",
                self.series_name,
                self.cfg.close_timeout_s,
            )
        dropped = self.queue.close()
        if dropped:
            logger.warning("%s: dropping steps %s at close", self.series_name, dropped)
        with self._announce_lock:
            subs = list(self._subscribers.values())
        for fs in subs:
            try:
                fs.send(MessageKind.CLOSE)
            except ConnectionLostError:
                pass
        if self._group is not None:
            self._group.close(self.cfg.close_timeout_s)
        self._teardown()
        logger.info(
            "stream writer %s closed (queue high water %d, discarded %d)",
            self.series_name,
            self.queue.high_water,
            len(self.queue.discarded),
        )

    def _teardown(self) -> None:
        self._stop.set()
        for s in self._listeners:
            s.close()
        # give readers a moment to hang up after CLOSE before cutting their sockets
        deadline = time.monotonic() + 2.0
        for t in self._threads:
            if t is threading.current_thread():
                continue
            t.join(timeout=max(0.0, deadline - time.monotonic()))
        with self._conns_lock:
            conns = list(self._conns)
        for fs in conns:
            fs.close()
        if self.is_leader:
            self.contact_path.unlink(missing_ok=True)


class StreamReader(ReaderHandle):
    """Reader side of the stream engine; one subscriber per handle."""

    def __init__(
        self,
        series_name: str,
        group: Sequence[RankMeta],
        cfg: EngineConfig,
        local_ranks: Iterable[int] | None = None,
    ) -> None:
        super().__init__(series_name, group, cfg, local_ranks)
        self.contact_path = cfg.contact_file(series_name)
        self._inbox: queue.Queue[StepAnnouncement | Exception | None] = queue.Queue()
        self._channels: dict[tuple[int, int], FramedSocket] = {}
        self._touched: set[tuple[int, int]] = set()
        self.connections: set[tuple[int, int]] = set()
        self._control, self.contact = self._rendezvous(cfg.rendezvous_timeout_s)
        self._endpoints = {
            w["rank"]: split_endpoint(w["endpoint"]) for w in self.contact["writers"]
        }
        self._pump = threading.Thread(target=self._pump_control, daemon=True)
        self._pump.start()

    def _rendezvous(self, timeout: float) -> tuple[FramedSocket, ContactDoc]:
        deadline = time.monotonic() + timeout
        last: Exception | None = None
        while time.monotonic() < deadline:
            try:
                contact = read_contact(self.contact_path)
                host, port = split_endpoint(contact["control"])
                if not contact_complete(contact):
                    published = f"{len(contact['writers'])} of {contact['writer_group_size']}"
                    last = RendezvousTimeoutError(f"only {published} writers have joined")
                    time.sleep(_RENDEZVOUS_POLL_S)
                    continue
                sock = socket.create_connection((host, port), timeout=timeout)
            except VersionMismatchError:
                raise
            except (OSError, ValueError, KeyError) as exc:
                last = exc
                time.sleep(_RENDEZVOUS_POLL_S)
                continue
            sock.settimeout(None)
            fs = FramedSocket(sock)
            fs.send_json(
                MessageKind.REGISTER,
                {
                    "series": self.series_name,
                    "group": [[m.rank, m.hostname] for m in self.group],
                    "local_ranks": self.local_ranks,
                },
            )
            ack = fs.recv()
            if ack is None or ack.kind == MessageKind.CLOSE:
                # a writer that is shutting down; wait for the next one
                fs.close()
                last = ConnectionLostError("writer closed during registration")
                time.sleep(_RENDEZVOUS_POLL_S)
                continue
            if ack.kind != MessageKind.REGISTER:
                fs.close()
                msg = f"expected REGISTER acknowledgement, got {ack.kind.name}"
                raise DecodeError(msg)
            self.subscriber = parse_json(ack.payload)["subscriber"]
            logger.info("registered with %s as subscriber %d", self.series_name, self.subscriber)
            return fs, contact
        msg = f"no writer for {self.series_name} at {self.contact_path} after {timeout}s ({last})"
        raise RendezvousTimeoutError(msg)

    def _pump_control(self) -> None:
        try:
            while (frame := self._control.recv()) is not None:
                if frame.kind == MessageKind.ANNOUNCE:
                    self._inbox.put(decode_announcement(frame.payload))
                elif frame.kind == MessageKind.CLOSE:
                    self._inbox.put(None)
                    return
            self._inbox.put(ConnectionLostError("writer hung up without CLOSE"))
        except ChunkstreamError as exc:
            self._inbox.put(exc)

    def _next(self) -> StepAnnouncement | None:
        item = self._inbox.get()
        if isinstance(item, Exception):
            raise item
        return item

    def _channel(self, reader: int, writer: int) -> FramedSocket:
        key = (reader, writer)
        fs = self._channels.get(key)
        if fs is None:
            try:
                sock = socket.create_connection(self._endpoints[writer])
            except OSError as exc:
                msg = f"cannot reach writer rank {writer}: {exc}"
                raise ConnectionLostError(msg) from exc
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            fs = FramedSocket(sock)
            self._channels[key] = fs
            self.connections.add((writer, reader))
            logger.debug("reader rank %d connected to writer rank %d", reader, writer)
        return fs

    def connection_count(self, reader: int) -> int:
        """Distinct writer ranks reader rank ``reader`` has opened data connections to."""
        return sum(1 for _, r in self.connections if r == reader)

    def _fetch(
        self, index: int, chunk: WrittenChunk, decl: DatasetDecl, part: Region, reader: int
    ) -> np.ndarray:
        step = self._step_open().step_index
        fs = self._channel(reader, chunk.producer_rank)
        self._touched.add((reader, chunk.producer_rank))
        fs.send_json(
            MessageKind.REQUEST,
            {
                "step": step,
                "chunk": index,
                "offset": list(part.offset),
                "extent": list(part.extent),
            },
        )
        frame = fs.recv()
        if frame is None:
            msg = f"writer rank {chunk.producer_rank} closed the data connection"
            raise ConnectionLostError(msg)
        if frame.kind != MessageKind.DATA:
            msg = f"expected DATA, got {frame.kind.name}"
            raise DecodeError(msg)
        head, raw = decode_data(frame.payload)
        if "error" in head:
            raise UnavailableRegionError(head["error"])
        expected = volume(part) * decl.width
        if len(raw) != expected:
            msg = f"DATA for {part} carries {len(raw)} bytes, expected {expected}"
            raise DecodeError(msg)
        return np.frombuffer(raw, dtype=decl.dtype).reshape(part.extent)

    def _release(self, step: StepAnnouncement) -> None:
        for reader, writer in sorted(self._touched):
            self._channels[(reader, writer)].send_json(
                MessageKind.RELEASE, {"step": step.step_index}
            )
        self._touched.clear()
        self._control.send_json(MessageKind.RELEASE, {"step": step.step_index})

    def _shutdown(self) -> None:
        for fs in [self._control, *self._channels.values()]:
            try:
                fs.send(MessageKind.CLOSE)
            except ConnectionLostError:
                pass
            fs.close()
        self._pump.join(timeout=1.0)
        logger.info(
            "reader of %s closed (%d data connections)", self.series_name, len(self.connections)
        )
