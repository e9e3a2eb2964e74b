"""Length-prefixed frames exchanged between stream writers and readers.

Frame layout (little-endian)::

    8 bytes  magic b"CHNKWIRE"
    2 bytes  protocol version
    2 bytes  message kind
    8 bytes  payload length
    n bytes  payload

REGISTER, JOIN, REQUEST, RELEASE and CLOSE carry sorted-key JSON, ANNOUNCE
carries an encoded step announcement, PART an encoded announcement optionally
followed by its payload blocks. DATA and OUTCOME carry a 4-byte header length,
a JSON header and raw bytes (cells of one region, or an encoded announcement).
"""

from __future__ import annotations

import json
import logging
import socket
import struct
import threading
from dataclasses import dataclass
from enum import IntEnum
from typing import Any

from .errors import (
    BindError,
    ConnectionLostError,
    DecodeError,
    TruncatedError,
    VersionMismatchError,
)

logger = logging.getLogger(__name__)

MAGIC = b"CHNKWIRE"
WIRE_VERSION = 1

_HEADER = struct.Struct("<8sHHQ")
_DATA_HEADER = struct.Struct("<I")


class MessageKind(IntEnum):
    REGISTER = 1
    ANNOUNCE = 2
    REQUEST = 3
    DATA = 4
    RELEASE = 5
    CLOSE = 6
    JOIN = 7  # a writer process joins the process leading its group
    PART = 8  # one member's share of a step
    OUTCOME = 9  # the leader's verdict on a step


def bind_listener(address: str, port_range: tuple[int, int]) -> socket.socket:
    """Listen on the first free port of ``port_range``; ``(0, 0)`` picks an ephemeral one.

    Raises:
        BindError: nothing in the range could be bound.
    """
    lo, hi = port_range
    if (lo, hi) == (0, 0):
        try:
            return socket.create_server((address, 0))
        except OSError as exc:
            msg = f"cannot bind {address}: {exc}"
            raise BindError(msg) from exc
    for port in range(lo, hi + 1):
        try:
            return socket.create_server((address, port))
        except OSError:
            continue
    msg = f"no free port in {lo}-{hi} on {address}"
    raise BindError(msg)


def endpoint_of(sock: socket.socket) -> str:
    host, port = sock.getsockname()[:2]
    return f"{host}:{port}"


def split_endpoint(endpoint: str) -> tuple[str, int]:
    host, _, port = endpoint.rpartition(":")
    return host, int(port)


@dataclass(frozen=True, slots=True)
class Frame:
    kind: MessageKind
    payload: bytes


def frame_header(kind: MessageKind, length: int) -> bytes:
    return _HEADER.pack(MAGIC, WIRE_VERSION, int(kind), length)


def parse_header(header: bytes) -> tuple[MessageKind, int]:
    """Validate a 20-byte frame header and return ``(kind, payload length)``."""
    if len(header) < _HEADER.size:
        msg = f"frame header needs {_HEADER.size} bytes, got {len(header)}"
        raise TruncatedError(msg)
    magic, version, kind, length = _HEADER.unpack(header[: _HEADER.size])
    if magic != MAGIC:
        msg = f"bad frame magic {magic!r}"
        raise DecodeError(msg)
    if version != WIRE_VERSION:
        msg = f"wire protocol version {version}, expected {WIRE_VERSION}"
        raise VersionMismatchError(msg)
    try:
        return MessageKind(kind), int(length)
    except ValueError as exc:
        msg = f"unknown message kind {kind}"
        raise DecodeError(msg) from exc


def json_payload(doc: Any) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def parse_json(payload: bytes) -> dict[str, Any]:
    try:
        doc = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        msg = f"malformed JSON frame: {exc}"
        raise DecodeError(msg) from exc
    if not isinstance(doc, dict):
        msg = "JSON frame payload must be an object"
        raise DecodeError(msg)
    return doc


def encode_data(header: dict[str, Any], raw: bytes) -> bytes:
    head = json_payload(header)
    return _DATA_HEADER.pack(len(head)) + head + raw


def decode_data(payload: bytes) -> tuple[dict[str, Any], bytes]:
    if len(payload) < _DATA_HEADER.size:
        msg = "DATA payload shorter than its header length field"
        raise TruncatedError(msg)
    (head_len,) = _DATA_HEADER.unpack_from(payload)
    start = _DATA_HEADER.size
    if len(payload) < start + head_len:
        msg = "DATA payload shorter than its JSON header"
        raise TruncatedError(msg)
    return parse_json(payload[start : start + head_len]), payload[start + head_len :]


def _recv_exact(sock: socket.socket, n: int, *, at_boundary: bool) -> bytes | None:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        r = sock.recv_into(view[got:], n - got)
        if r == 0:
            if got == 0 and at_boundary:
                return None
            msg = f"peer closed mid-frame after {got} of {n} bytes"
            raise ConnectionLostError(msg)
        got += r
    return bytes(buf)


class FramedSocket:
    """A connected socket speaking the frame protocol.

    Sends are serialized by a lock so several threads may share one socket;
    receiving is expected from a single thread.
    """

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self._send_lock = threading.Lock()
        self.closed = False

    def send(self, kind: MessageKind, payload: bytes = b"") -> None:
        with self._send_lock:
            try:
                self.sock.sendall(frame_header(kind, len(payload)))
                if payload:
                    self.sock.sendall(payload)
            except OSError as exc:
                msg = f"send of {kind.name} failed: {exc}"
                raise ConnectionLostError(msg) from exc
        logger.debug("sent %s (%d bytes)", kind.name, len(payload))

    def send_json(self, kind: MessageKind, doc: Any) -> None:
        self.send(kind, json_payload(doc))

    def recv(self) -> Frame | None:
        """Next frame, or ``None`` when the peer closed cleanly between frames."""
        try:
            header = _recv_exact(self.sock, _HEADER.size, at_boundary=True)
            if header is None:
                return None
            kind, length = parse_header(header)
            payload = _recv_exact(self.sock, length, at_boundary=False) if length else b""
        except OSError as exc:
            if isinstance(exc, ConnectionLostError):
                raise
            msg = f"receive failed: {exc}"
            raise ConnectionLostError(msg) from exc
        assert payload is not None
        return Frame(kind, payload)

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        try:
            # wakes a thread blocked in recv() on this socket
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass


def connect(endpoint: str, timeout: float | None = None) -> FramedSocket:
    """Open a framed connection to ``endpoint`` (``host:port``); raises OSError."""
    sock = socket.create_connection(split_endpoint(endpoint), timeout=timeout)
    sock.settimeout(None)
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return FramedSocket(sock)
