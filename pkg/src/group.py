"""Writer groups whose ranks live in several processes.

The process hosting the lowest rank of a group (or of one file aggregate)
leads it. Every other process of the group joins the leader over a framed
connection, hands over its share of each step and waits for the leader's
verdict::

    leader = GroupLeader("sim", expected={1, 2}, join_timeout=30)
    parts = leader.gather(step)                  # one Part per member process
    merged = merge_parts(step, [own, *(p.announcement for p in parts)])
    leader.reply(parts, {"outcome": "published"}, encode_announcement(merged))

    member = GroupMember.connect("sim", locate, {"ranks": [1, 2]}, timeout=30)
    head, raw = member.submit(step, encode_part(own))

A member ships its payload blocks along with its chunk table when the leader
has to store them (file aggregates); stream members keep their payloads and
serve them from their own data endpoints.
"""

from __future__ import annotations

import logging
import queue
import threading
import time
from dataclasses import dataclass, field, replace
from typing import TYPE_CHECKING, Any

import numpy as np

from .errors import (
    ChunkstreamError,
    ChunkValidationError,
    ConfigError,
    ConnectionLostError,
    DecodeError,
    RendezvousTimeoutError,
    StepStateError,
)
from .geometry import intersect
from .model import (
    build_announcement,
    decode_announcement,
    encode_announcement,
    encoded_length,
    volume,
)
from .wire import (
    FramedSocket,
    MessageKind,
    bind_listener,
    connect,
    decode_data,
    encode_data,
    endpoint_of,
    parse_json,
)

if TYPE_CHECKING:
    import socket
    from collections.abc import Callable, Iterable, Mapping, Sequence

    from .model import DatasetDecl, StepAnnouncement, WrittenChunk
    from .types import AttributeValue

logger = logging.getLogger(__name__)

DISCARDED = "discarded"

_POLL_S = 0.05
_JOIN_POLL_S = 0.05
_HANGUP_S = 2.0


# ---------------------------------------------------------------------------
# Parts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Part:
    """One member's share of a step; ``payloads`` follow its chunk table."""

    announcement: StepAnnouncement
    payloads: list[np.ndarray] | None = None
    sender: _Member | None = field(default=None, compare=False, repr=False)


def encode_part(announcement: StepAnnouncement, payloads: Sequence[np.ndarray] = ()) -> bytes:
    """Encoded announcement followed by the C-order payload blocks, if any."""
    return encode_announcement(announcement) + b"".join(arr.tobytes() for arr in payloads)


def decode_part(payload: bytes) -> Part:
    """Inverse of :func:`encode_part`.

    Raises:
        DecodeError: malformed announcement, or blocks that do not add up.
    """
    total = encoded_length(payload)
    announcement = decode_announcement(payload[:total])
    rest = memoryview(payload)[total:]
    if not rest:
        return Part(announcement, None if announcement.chunk_table else [])
    decls = announcement.decls
    payloads = []
    pos = 0
    for chunk in announcement.chunk_table:
        decl = decls[chunk.dataset]
        n = volume(chunk.region) * decl.width
        if pos + n > len(rest):
            msg = f"step {announcement.step_index}: part ends inside the block of {chunk.region}"
            raise DecodeError(msg)
        block = np.frombuffer(rest[pos : pos + n], dtype=decl.dtype)
        payloads.append(block.reshape(chunk.region.extent))
        pos += n
    if pos != len(rest):
        msg = f"step {announcement.step_index}: {len(rest) - pos} bytes after the last block"
        raise DecodeError(msg)
    return Part(announcement, payloads)


def merge_parts(step_index: int, parts: Sequence[StepAnnouncement]) -> StepAnnouncement:
    """One announcement with the datasets, attributes and chunks of every part.

    Attributes set by several parts keep the value of the first one.

    Raises:
        StepStateError: a part belongs to another step.
        ChunkValidationError: two parts declare a dataset differently, or
            their chunks overlap.
    """
    decls: dict[str, DatasetDecl] = {}
    attributes: dict[str, AttributeValue] = {}
    chunks: list[WrittenChunk] = []
    for part in parts:
        if part.step_index != step_index:
            msg = f"part of step {part.step_index} merged into step {step_index}"
            raise StepStateError(msg)
        for decl in part.datasets:
            known = decls.setdefault(decl.name, decl)
            if known != decl:
                msg = f"{decl.name}: declared as {known} and as {decl} in step {step_index}"
                raise ChunkValidationError(msg)
        for key, value in part.attributes.items():
            attributes.setdefault(key, value)
        for c in part.chunk_table:
            for other in chunks:
                if other.dataset == c.dataset and intersect(other.region, c.region) is not None:
                    msg = f"{c.dataset}: chunk {c.region} of rank {c.producer_rank} overlaps "
                    msg += f"{other.region} of rank {other.producer_rank}"
                    raise ChunkValidationError(msg)
        chunks.extend(part.chunk_table)
    return build_announcement(step_index, decls.values(), attributes, chunks)


def remap_payloads(
    own: StepAnnouncement, merged: StepAnnouncement, payloads: Mapping[int, np.ndarray]
) -> dict[int, np.ndarray]:
    """Re-key payloads of ``own``'s chunk table by their index in ``merged``."""
    where = {c: i for i, c in enumerate(merged.chunk_table)}
    return {where[c]: payloads[i] for i, c in enumerate(own.chunk_table)}


# ---------------------------------------------------------------------------
# Leader
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class _Member:
    fs: FramedSocket
    ranks: frozenset[int]
    parts: dict[int, Part] = field(default_factory=dict)
    done: bool = False
    lost: Exception | None = None


class GroupLeader:
    """Gathers the other member processes' shares of each step.

    Args:
        name: Group name used in messages.
        expected: Ranks hosted by other processes.
        join_timeout: How long :meth:`gather` waits for them to join.
        on_join: Called with the JOIN document of each accepted member,
            under the leader's lock.
    """

    def __init__(
        self,
        name: str,
        expected: Iterable[int],
        join_timeout: float,
        on_join: Callable[[dict[str, Any]], None] | None = None,
    ) -> None:
        self.name = name
        self.expected = frozenset(expected)
        self.join_timeout = join_timeout
        self._on_join = on_join
        self._cond = threading.Condition()
        self._members: list[_Member] = []
        self._closing = False
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self.endpoint: str | None = None

    def listen(self, address: str, port_range: tuple[int, int]) -> str:
        """Accept members on a listener of our own; returns its endpoint."""
        self._listener = bind_listener(address, port_range)
        self.endpoint = endpoint_of(self._listener)
        self._spawn(self._accept_loop, self._listener)
        logger.info("group %s: leader listening on %s", self.name, self.endpoint)
        return self.endpoint

    def _spawn(self, target: Callable[..., None], *args: object) -> None:
        t = threading.Thread(target=target, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, listener: socket.socket) -> None:
        listener.settimeout(_POLL_S)
        while True:
            with self._cond:
                if self._closing:
                    return
            try:
                conn, _ = listener.accept()
            except TimeoutError:
                continue
            except OSError:
                return
            conn.settimeout(None)
            self._spawn(self._admit, FramedSocket(conn))

    def _admit(self, fs: FramedSocket) -> None:
        try:
            frame = fs.recv()
        except ChunkstreamError as exc:
            logger.warning("group %s: bad join: %s", self.name, exc)
            fs.close()
            return
        if frame is None or frame.kind != MessageKind.JOIN:
            fs.close()
            return
        self.serve(fs, parse_json(frame.payload))

    @property
    def complete(self) -> bool:
        """Every expected rank has joined."""
        with self._cond:
            return self._claimed() == self.expected

    def _claimed(self) -> frozenset[int]:
        return frozenset(r for m in self._members for r in m.ranks)

    def serve(self, fs: FramedSocket, hello: dict[str, Any]) -> None:
        """Run the leader's side of one member connection until it hangs up."""
        try:
            ranks = frozenset(int(r) for r in hello.get("ranks", ()))
        except (TypeError, ValueError):
            ranks = frozenset()
        problem: str | None = None
        member: _Member | None = None
        with self._cond:
            claimed = self._claimed()
            if self._closing:
                problem = "group is closing"
            elif not ranks or not ranks <= self.expected:
                problem = (
                    f"ranks {sorted(ranks)} are not expected from another process "
                    f"(expected {sorted(self.expected)})"
                )
            elif ranks & claimed:
                problem = f"ranks {sorted(ranks & claimed)} already joined"
            else:
                member = _Member(fs, ranks)
                if self._on_join is not None:
                    self._on_join(hello)
                self._members.append(member)
                self._cond.notify_all()
        if member is None:
            logger.warning("group %s: refused member: %s", self.name, problem)
            try:
                fs.send_json(MessageKind.JOIN, {"error": problem})
            except ConnectionLostError:
                pass
            fs.close()
            return
        try:
            fs.send_json(MessageKind.JOIN, {"group": self.name, "ranks": sorted(ranks)})
        except ConnectionLostError as exc:
            self._lose(member, exc)
            return
        logger.info("group %s: ranks %s joined", self.name, sorted(ranks))
        self._pump(member)

    def _pump(self, member: _Member) -> None:
        lost: Exception | None = None
        try:
            while (frame := member.fs.recv()) is not None:
                if frame.kind == MessageKind.PART:
                    part = replace(decode_part(frame.payload), sender=member)
                    step = part.announcement.step_index
                    with self._cond:
                        closing = self._closing
                        if not closing:
                            member.parts[step] = part
                            self._cond.notify_all()
                    if closing:
                        self._send_outcome(member, step, {"outcome": DISCARDED})
                elif frame.kind == MessageKind.CLOSE:
                    with self._cond:
                        member.done = True
                        self._cond.notify_all()
        except ChunkstreamError as exc:
            lost = exc
        self._lose(member, lost or ConnectionLostError("member hung up without CLOSE"))

    def _lose(self, member: _Member, exc: Exception) -> None:
        with self._cond:
            if not member.done:
                member.lost = exc
                logger.warning("group %s: ranks %s lost: %s", self.name, sorted(member.ranks), exc)
            self._cond.notify_all()

    def gather(self, step: int) -> list[Part]:
        """Parts of ``step`` from every member still producing.

        Members that finished, or already moved past ``step``, contribute
        nothing; parts of steps the leader skipped are answered as discarded.

        Raises:
            RendezvousTimeoutError: some ranks never joined.
            ConnectionLostError: a member vanished without closing.
        """
        deadline = time.monotonic() + self.join_timeout
        with self._cond:
            while self._claimed() != self.expected:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    missing = sorted(self.expected - self._claimed())
                    msg = f"group {self.name}: ranks {missing} did not join within "
                    msg += f"{self.join_timeout}s"
                    raise RendezvousTimeoutError(msg)
                self._cond.wait(remaining)
        while True:
            stale: list[tuple[_Member, int]] = []
            with self._cond:
                waiting = False
                for m in self._members:
                    if m.lost is not None:
                        msg = f"group {self.name}: ranks {sorted(m.ranks)}: {m.lost}"
                        raise ConnectionLostError(msg)
                    for s in [s for s in m.parts if s < step]:
                        del m.parts[s]
                        stale.append((m, s))
                    if not m.parts and not m.done:
                        waiting = True
                if waiting and not stale:
                    self._cond.wait()
                    continue
                parts: list[Part] = []
                if not waiting:
                    parts = [m.parts.pop(step) for m in self._members if step in m.parts]
            # a member sends nothing newer until it hears about these
            for m, s in stale:
                self._send_outcome(m, s, {"outcome": DISCARDED})
            if not waiting:
                return parts

    def reply(self, parts: Iterable[Part], doc: dict[str, Any], raw: bytes = b"") -> None:
        """Send the verdict on a gathered step to the members that contributed ``parts``."""
        for part in parts:
            if part.sender is not None:
                self._send_outcome(part.sender, part.announcement.step_index, doc, raw)

    def _send_outcome(
        self, member: _Member, step: int, doc: dict[str, Any], raw: bytes = b""
    ) -> None:
        try:
            member.fs.send(MessageKind.OUTCOME, encode_data(doc | {"step": step}, raw))
        except ConnectionLostError as exc:
            self._lose(member, exc)

    def broadcast(self, kind: MessageKind, doc: dict[str, Any]) -> None:
        """Send ``doc`` to every member still connected."""
        with self._cond:
            members = [m for m in self._members if m.lost is None]
        for m in members:
            try:
                m.fs.send_json(kind, doc)
            except ConnectionLostError as exc:
                self._lose(m, exc)

    def close(self, timeout: float) -> None:
        """Discard parts still waiting, let members finish, then send CLOSE."""
        with self._cond:
            self._closing = True
            pending = [(m, s) for m in self._members for s in m.parts]
            for m in self._members:
                m.parts.clear()
        for m, s in pending:
            self._send_outcome(m, s, {"outcome": DISCARDED})
        deadline = time.monotonic() + timeout
        with self._cond:
            while not all(m.done or m.lost is not None for m in self._members):
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    logger.warning("group %s: members still producing at close", self.name)
                    break
                self._cond.wait(remaining)
            members = list(self._members)
        for m in members:
            try:
                m.fs.send(MessageKind.CLOSE)
            except ConnectionLostError:
                pass
        if self._listener is not None:
            self._listener.close()
        hangup = time.monotonic() + _HANGUP_S
        for t in self._threads:
            t.join(timeout=max(0.0, hangup - time.monotonic()))
        for m in members:
            m.fs.close()
        logger.info("group %s: leader closed", self.name)


# ---------------------------------------------------------------------------
# Member
# ---------------------------------------------------------------------------


class GroupMember:
    """A process's connection to the leader of its group; see :meth:`connect`."""

    def __init__(
        self, name: str, fs: FramedSocket, on_release: Callable[[int], None] | None = None
    ) -> None:
        self.name = name
        self._fs = fs
        self._on_release = on_release
        self._outcomes: queue.Queue[tuple[dict[str, Any], bytes] | Exception] = queue.Queue()
        self._ended = threading.Event()
        self._pump_thread = threading.Thread(target=self._pump, daemon=True)
        self._pump_thread.start()

    @classmethod
    def connect(
        cls,
        name: str,
        locate: Callable[[], str],
        hello: dict[str, Any],
        timeout: float,
        on_release: Callable[[int], None] | None = None,
    ) -> GroupMember:
        """Join the leader whose endpoint ``locate`` returns, retrying until ``timeout``.

        ``locate`` may raise OSError, KeyError or DecodeError while the leader
        has not published its endpoint yet.

        Raises:
            RendezvousTimeoutError: no leader accepted us in time.
            ConfigError: the leader refused our ranks.
        """
        deadline = time.monotonic() + timeout
        last: Exception | None = None
        while time.monotonic() < deadline:
            try:
                fs = connect(locate(), timeout=timeout)
            except (OSError, KeyError, ValueError) as exc:
                last = exc
                time.sleep(_JOIN_POLL_S)
                continue
            try:
                fs.send_json(MessageKind.JOIN, hello)
                ack = fs.recv()
            except ChunkstreamError as exc:
                fs.close()
                last = exc
                time.sleep(_JOIN_POLL_S)
                continue
            if ack is None or ack.kind == MessageKind.CLOSE:
                fs.close()
                last = ConnectionLostError("leader closed during join")
                time.sleep(_JOIN_POLL_S)
                continue
            if ack.kind != MessageKind.JOIN:
                fs.close()
                msg = f"expected JOIN acknowledgement, got {ack.kind.name}"
                raise DecodeError(msg)
            doc = parse_json(ack.payload)
            if "error" in doc:
                fs.close()
                msg = f"group {name}: {doc['error']}"
                raise ConfigError(msg)
            logger.info("group %s: joined as ranks %s", name, doc.get("ranks"))
            return cls(name, fs, on_release)
        msg = f"group {name}: no leader accepted ranks {hello.get('ranks')} after {timeout}s"
        msg += f" ({last})"
        raise RendezvousTimeoutError(msg)

    def _pump(self) -> None:
        try:
            while (frame := self._fs.recv()) is not None:
                if frame.kind == MessageKind.OUTCOME:
                    self._outcomes.put(decode_data(frame.payload))
                elif frame.kind == MessageKind.RELEASE:
                    if self._on_release is not None:
                        self._on_release(int(parse_json(frame.payload)["step"]))
                elif frame.kind == MessageKind.CLOSE:
                    self._outcomes.put(ConnectionLostError(f"group {self.name}: leader closed"))
                    return
            self._outcomes.put(ConnectionLostError("leader hung up without CLOSE"))
        except ChunkstreamError as exc:
            self._outcomes.put(exc)
        finally:
            self._ended.set()

    def submit(self, step: int, part: bytes) -> tuple[dict[str, Any], bytes]:
        """Hand our share of ``step`` to the leader and wait for its verdict.

        Raises:
            ConnectionLostError: the leader went away.
            StepStateError: the leader rejected the step.
        """
        self._fs.send(MessageKind.PART, part)
        item = self._outcomes.get()
        if isinstance(item, Exception):
            raise item
        head, raw = item
        if head.get("step") != step:
            msg = f"group {self.name}: verdict for step {head.get('step')}, expected {step}"
            raise DecodeError(msg)
        if "error" in head:
            msg = f"group {self.name}: leader rejected step {step}: {head['error']}"
            raise StepStateError(msg)
        return head, raw

    def close(self, timeout: float) -> None:
        """Tell the leader we are done and wait until it closes the group."""
        try:
            self._fs.send(MessageKind.CLOSE)
        except ConnectionLostError:
            pass
        if not self._ended.wait(timeout):
            logger.warning("group %s: leader did not close within %ss", self.name, timeout)
        self._fs.close()
        self._pump_thread.join(timeout=_HANGUP_S)
