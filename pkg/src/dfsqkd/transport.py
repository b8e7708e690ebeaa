"""Classical-channel transport for the sifting conversation.

Wire format, bit-exact: a 4-byte big-endian unsigned length prefix
followed by a UTF-8 JSON body ``{"type": "<TYPE>", "payload": {...}}``.
Encoding is canonical (sorted keys, no whitespace) so equal messages
produce equal bytes. Frames are capped at 16 MiB. Bit arrays travel
base-64 encoded, packed 8 bits per byte, most significant bit first.

Two interchangeable transports are provided: an in-process pair backed
by queues, and a length-framed byte-stream transport for sockets. A
seeded session produces bit-identical results over either.
"""

from __future__ import annotations

import base64
import json
import queue
import socket
import struct
from dataclasses import dataclass, field

import numpy as np

MAX_FRAME_BYTES = 16 * 1024 * 1024

MESSAGE_TYPES = (
    "HELLO",
    "DETECTIONS",
    "SIFT_KEEP",
    "SAMPLE_REQUEST",
    "SAMPLE_BITS",
    "SUMMARY",
    "BYE",
)


class TransportError(Exception):
    """Base class for channel failures."""


class TransportClosed(TransportError):
    """The peer closed the channel."""


class FrameError(TransportError):
    """Malformed, oversized, or truncated frame."""


class ProtocolError(TransportError):
    """Structurally valid frame that violates the conversation contract."""


@dataclass(frozen=True)
class Message:
    type: str
    payload: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.type not in MESSAGE_TYPES:
            raise ProtocolError(f"unknown message type {self.type!r}")
        if not isinstance(self.payload, dict):
            raise ProtocolError("payload must be a JSON object")


def pack_bits(bits) -> str:
    """Bit sequence -> base-64 string (np.packbits order: MSB first)."""
    arr = np.asarray(bits, dtype=np.uint8)
    return base64.b64encode(np.packbits(arr).tobytes()).decode("ascii")


def unpack_bits(data: str, n: int) -> np.ndarray:
    raw = np.frombuffer(base64.b64decode(data), dtype=np.uint8)
    bits = np.unpackbits(raw)
    if len(bits) < n:
        raise ProtocolError(f"bit array too short: {len(bits)} < {n}")
    return bits[:n]


def encode_frame(message: Message) -> bytes:
    body = json.dumps(
        {"type": message.type, "payload": message.payload},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    if len(body) > MAX_FRAME_BYTES:
        raise FrameError(f"frame body of {len(body)} bytes exceeds the {MAX_FRAME_BYTES} cap")
    return struct.pack(">I", len(body)) + body


def decode_frame(data: bytes) -> Message:
    """Decode exactly one complete frame."""
    if len(data) < 4:
        raise FrameError("truncated frame: missing length prefix")
    (length,) = struct.unpack(">I", data[:4])
    if length > MAX_FRAME_BYTES:
        raise FrameError(f"declared frame length {length} exceeds the {MAX_FRAME_BYTES} cap")
    if len(data) != 4 + length:
        raise FrameError(f"length mismatch: prefix says {length}, body has {len(data) - 4} bytes")
    return _parse_body(data[4:])


def _parse_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FrameError(f"malformed frame body: {exc}") from exc
    if not isinstance(obj, dict) or "type" not in obj:
        raise FrameError("frame body is not a message object")
    return Message(type=obj["type"], payload=obj.get("payload", {}))


class Transport:
    """Reliable, ordered, duplex message channel."""

    def send(self, message: Message) -> None:
        raise NotImplementedError

    def recv(self) -> Message:
        raise NotImplementedError

    def close(self) -> None:
        pass


class InMemoryTransport(Transport):
    """Queue-backed endpoint; create both ends with :func:`memory_pair`."""

    _CLOSE = object()

    def __init__(self, outbox: queue.Queue, inbox: queue.Queue):
        self._outbox = outbox
        self._inbox = inbox
        self._closed = False

    def send(self, message: Message) -> None:
        if self._closed:
            raise TransportClosed("transport already closed")
        # Round trip through the frame codec so both transports exercise
        # the same validation and size limits.
        self._outbox.put(encode_frame(message))

    def recv(self) -> Message:
        item = self._inbox.get()
        if item is self._CLOSE:
            raise TransportClosed("peer closed the transport")
        return decode_frame(item)

    def close(self) -> None:
        if not self._closed:
            self._closed = True
            self._outbox.put(self._CLOSE)


def memory_pair() -> tuple[InMemoryTransport, InMemoryTransport]:
    a_to_b: queue.Queue = queue.Queue()
    b_to_a: queue.Queue = queue.Queue()
    return InMemoryTransport(a_to_b, b_to_a), InMemoryTransport(b_to_a, a_to_b)


class StreamTransport(Transport):
    """Framed transport over a connected socket."""

    def __init__(self, sock: socket.socket):
        self._sock = sock

    def send(self, message: Message) -> None:
        try:
            self._sock.sendall(encode_frame(message))
        except OSError as exc:
            raise TransportClosed(f"send failed: {exc}") from exc

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        remaining = n
        while remaining:
            try:
                chunk = self._sock.recv(remaining)
            except OSError as exc:
                raise TransportClosed(f"recv failed: {exc}") from exc
            if not chunk:
                raise TransportClosed("peer closed the connection")
            chunks.append(chunk)
            remaining -= len(chunk)
        return b"".join(chunks)

    def recv(self) -> Message:
        header = self._read_exact(4)
        (length,) = struct.unpack(">I", header)
        if length > MAX_FRAME_BYTES:
            raise FrameError(f"declared frame length {length} exceeds the {MAX_FRAME_BYTES} cap")
        return _parse_body(self._read_exact(length))

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def expect(transport: Transport, expected_type: str) -> Message:
    """Receive and require a specific message type."""
    msg = transport.recv()
    if msg.type != expected_type:
        raise ProtocolError(f"expected {expected_type}, got {msg.type}")
    return msg


def validate_detections_payload(payload: dict) -> None:
    slots = payload.get("slots")
    if not isinstance(slots, list):
        raise ProtocolError("DETECTIONS payload must carry a slot list")
    if any(b <= a for a, b in zip(slots, slots[1:])):
        raise ProtocolError("DETECTIONS slot indices must be strictly increasing")
