"""Frame encoding and request/response transports.

Frame layout (all little-endian)::

    magic    4 bytes  b"HRF1"
    msg_type u8
    flags    u8       bit0 = values compressed
    length   u64      payload byte count
    payload  sections, each ``u64 length`` followed by raw bytes

Numeric sections are raw little-endian array memory; nothing is encoded
element by element.  Two transports carry frames: an in-process one that
calls the endpoint directly, and a TCP one.  Both put the same frame bytes
on the wire; the TCP envelope adds a u64 request id in front of each frame.
"""
import enum
import itertools
import logging
import socket
import socketserver
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import errors
from .errors import ProtocolError, RemoteError, TransportError

log = logging.getLogger(__name__)

MAGIC = b"HRF1"
HEADER = struct.Struct("<4sBBQ")
SECTION_LEN = struct.Struct("<Q")
REQUEST_ID = struct.Struct("<Q")
FLAG_COMPRESSED = 0x01
MAX_PAYLOAD = (1 << 63) - 1


class MsgType(enum.IntEnum):
    REGISTER_SAMPLE = 1
    PULL_EMBEDDING = 2
    EMBEDDING_REPLY = 3
    PUSH_GRADIENT = 4
    ACK = 5
    ERROR = 6


# Messages that may be re-sent after a timeout.  PushGradient is never retried.
IDEMPOTENT = frozenset({MsgType.PULL_EMBEDDING})


@dataclass
class Frame:
    msg_type: MsgType
    flags: int
    sections: List[bytes]

    def array(self, i: int, dtype) -> np.ndarray:
        return as_array(self.sections[i], dtype)

    @property
    def compressed(self) -> bool:
        return bool(self.flags & FLAG_COMPRESSED)


def _section_bytes(section) -> bytes:
    if isinstance(section, np.ndarray):
        dt = section.dtype
        if dt.byteorder == ">" or (dt.byteorder == "=" and not _LITTLE):
            section = section.astype(dt.newbyteorder("<"))
        return np.ascontiguousarray(section).tobytes()
    return bytes(section)


_LITTLE = np.little_endian


def encode_frame(msg_type, flags: int = 0, sections: Sequence = ()) -> bytes:
    parts = []
    for s in sections:
        b = _section_bytes(s)
        parts.append(SECTION_LEN.pack(len(b)))
        parts.append(b)
    payload = b"".join(parts)
    if len(payload) > MAX_PAYLOAD:
        raise errors.PreconditionError("payload too large")
    return HEADER.pack(MAGIC, int(msg_type), flags & 0xFF, len(payload)) + payload


def decode_frame(data) -> Frame:
    data = memoryview(bytes(data)) if not isinstance(data, (bytes, bytearray)) else memoryview(data)
    if len(data) < HEADER.size:
        raise ProtocolError("truncated frame header", offset=len(data))
    magic, msg_type, flags, length = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {bytes(magic)!r}", offset=0)
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}", offset=4) from None
    end = HEADER.size + length
    if len(data) < end:
        raise ProtocolError(f"truncated payload: header says {length} bytes, got {len(data) - HEADER.size}",
                            offset=len(data))
    if len(data) > end:
        raise ProtocolError("trailing bytes after frame", offset=end)
    sections = []
    pos = HEADER.size
    while pos < end:
        if pos + SECTION_LEN.size > end:
            raise ProtocolError("truncated section length", offset=pos)
        (n,) = SECTION_LEN.unpack_from(data, pos)
        pos += SECTION_LEN.size
        if n > end - pos:
            raise ProtocolError(f"section of {n} bytes overruns frame", offset=pos)
        sections.append(bytes(data[pos:pos + n]))
        pos += n
    return Frame(msg_type, flags, sections)


def as_array(section: bytes, dtype) -> np.ndarray:
    dt = np.dtype(dtype).newbyteorder("<")
    if len(section) % dt.itemsize:
        raise ProtocolError(f"section length {len(section)} not a multiple of {dt.itemsize}")
    return np.frombuffer(section, dtype=dt).astype(np.dtype(dtype).newbyteorder("="), copy=False)


# Error frames carry (u16 code, utf-8 message).  Codes map back to exception types.
_ERROR_CODES = {
    1: errors.StaleSampleError,
    2: errors.BackpressureError,
    3: errors.ProtocolError,
    4: errors.DivergenceError,
    5: errors.PreconditionError,
    6: errors.CorruptPayloadError,
    99: RemoteError,
}
_CODE_OF = {cls: code for code, cls in _ERROR_CODES.items()}


def error_frame(exc: BaseException) -> bytes:
    code = 99
    for cls in type(exc).__mro__:
        if cls in _CODE_OF:
            code = _CODE_OF[cls]
            break
    return encode_frame(MsgType.ERROR, 0, [struct.pack("<H", code), str(exc).encode()])


def raise_if_error(frame: Frame) -> Frame:
    if frame.msg_type == MsgType.ERROR:
        (code,) = struct.unpack("<H", frame.sections[0])
        raise _ERROR_CODES.get(code, RemoteError)(frame.sections[1].decode(errors="replace"))
    return frame


class Endpoint:
    """Server side of a transport.

    Wraps a frame handler with at-most-once execution per request id and a
    kill switch used by fault drills.
    """

    def __init__(self, handler: Callable[[bytes], bytes], name: str = "endpoint", reply_cache: int = 4096):
        self.handler = handler
        self.name = name
        self.alive = True
        self._replies = OrderedDict()
        self._cache_size = reply_cache
        self._lock = threading.Lock()
        self.served = 0

    def handle(self, request_id: int, frame: bytes) -> bytes:
        if not self.alive:
            raise TransportError(f"{self.name} is down")
        with self._lock:
            cached = self._replies.get(request_id)
        if cached is not None:
            return cached
        try:
            reply = self.handler(frame)
        except errors.HybridError as exc:
            reply = error_frame(exc)
        with self._lock:
            self._replies[request_id] = reply
            if len(self._replies) > self._cache_size:
                self._replies.popitem(last=False)
            self.served += 1
        return reply

    def kill(self):
        self.alive = False

    def revive(self, handler=None):
        if handler is not None:
            self.handler = handler
        with self._lock:
            self._replies.clear()
        self.alive = True


class PendingReply:
    """A reply that was produced at issue time but is only delivered after
    the injected link latency has elapsed."""

    def __init__(self, reply: Optional[bytes], ready_at: float, error: Optional[BaseException] = None):
        self._reply = reply
        self._error = error
        self.ready_at = ready_at

    def ready(self) -> bool:
        return time.perf_counter() >= self.ready_at

    def result(self) -> bytes:
        delay = self.ready_at - time.perf_counter()
        if delay > 0:
            time.sleep(delay)
        if self._error is not None:
            raise self._error
        return self._reply


_request_ids = itertools.count(1)


class InProcessTransport:
    """Deterministic transport: the endpoint runs in the caller's thread."""

    def __init__(self, endpoint: Endpoint, latency: float = 0.0):
        self.endpoint = endpoint
        self.latency = latency

    def request(self, frame: bytes, request_id: Optional[int] = None) -> bytes:
        rid = next(_request_ids) if request_id is None else request_id
        reply = self.endpoint.handle(rid, frame)
        if self.latency:
            time.sleep(self.latency)
        return reply

    def request_async(self, frame: bytes) -> PendingReply:
        start = time.perf_counter()
        try:
            reply = self.endpoint.handle(next(_request_ids), frame)
            return PendingReply(reply, start + self.latency)
        except TransportError as exc:
            return PendingReply(None, start, exc)

    def close(self):
        pass


class _TcpHandler(socketserver.BaseRequestHandler):
    def handle(self):
        sock = self.request
        endpoint = self.server.endpoint
        while True:
            try:
                head = _recv_exact(sock, REQUEST_ID.size + HEADER.size)
            except (ConnectionError, OSError):
                return
            if head is None:
                return
            (rid,) = REQUEST_ID.unpack_from(head, 0)
            _, _, _, length = HEADER.unpack_from(head, REQUEST_ID.size)
            try:
                body = _recv_exact(sock, length)
            except (ConnectionError, OSError):
                return
            if body is None:
                return
            frame = head[REQUEST_ID.size:] + body
            try:
                reply = endpoint.handle(rid, frame)
            except TransportError:
                return
            except errors.HybridError as exc:
                reply = error_frame(exc)
            try:
                sock.sendall(REQUEST_ID.pack(rid) + reply)
            except OSError:
                return


def _recv_exact(sock, n: int) -> Optional[bytes]:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError("connection closed mid-frame", offset=len(buf))
            return None
        buf.extend(chunk)
    return bytes(buf)


class _ThreadingServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True


class TcpServer:
    """Serves one endpoint on ``host:port`` (port 0 picks a free port)."""

    def __init__(self, endpoint: Endpoint, listen_addr: str = "127.0.0.1:0"):
        host, port = listen_addr.rsplit(":", 1)
        self.endpoint = endpoint
        self._server = _ThreadingServer((host, int(port)), _TcpHandler)
        self._server.endpoint = endpoint
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)

    @property
    def address(self) -> str:
        host, port = self._server.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "TcpServer":
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()


class TcpTransport:
    """Client side of the TCP transport.

    One persistent connection; requests are serialised on it so replies come
    back in FIFO order.  Idempotent messages are retried on timeout.
    """

    def __init__(self, address: str, timeout: float = 5.0, retries: int = 3, latency: float = 0.0):
        self.address = address
        self.timeout = timeout
        self.retries = retries
        self.latency = latency
        self._sock = None
        self._lock = threading.Lock()

    def _connect(self):
        host, port = self.address.rsplit(":", 1)
        try:
            self._sock = socket.create_connection((host, int(port)), timeout=self.timeout)
            self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        except OSError as exc:
            self._sock = None
            raise TransportError(f"cannot reach {self.address}: {exc}") from exc

    def _roundtrip(self, rid: int, frame: bytes) -> bytes:
        if self._sock is None:
            self._connect()
        try:
            self._sock.sendall(REQUEST_ID.pack(rid) + frame)
            head = _recv_exact(self._sock, REQUEST_ID.size + HEADER.size)
            if head is None:
                raise TransportError(f"{self.address} closed the connection")
            (got,) = REQUEST_ID.unpack_from(head, 0)
            _, _, _, length = HEADER.unpack_from(head, REQUEST_ID.size)
            body = _recv_exact(self._sock, length)
            if body is None and length:
                raise ProtocolError("connection closed mid-frame", offset=0)
        except socket.timeout as exc:
            self.close()
            raise TransportError(f"timeout talking to {self.address}", retriable=True) from exc
        except (ConnectionError, OSError) as exc:
            self.close()
            raise TransportError(f"connection to {self.address} lost: {exc}") from exc
        if got != rid:
            raise ProtocolError(f"reply for request {got}, expected {rid}")
        return head[REQUEST_ID.size:] + (body or b"")

    def request(self, frame: bytes, request_id: Optional[int] = None) -> bytes:
        reply = self._send(frame, request_id)
        if self.latency:
            time.sleep(self.latency)
        return reply

    def _send(self, frame: bytes, request_id: Optional[int] = None) -> bytes:
        rid = next(_request_ids) if request_id is None else request_id
        msg_type = frame[4] if len(frame) > 4 else 0
        attempts = 1 + (self.retries if msg_type in IDEMPOTENT else 0)
        with self._lock:
            for attempt in range(attempts):
                try:
                    reply = self._roundtrip(rid, frame)
                    break
                except TransportError as exc:
                    if not exc.retriable or attempt == attempts - 1:
                        raise
                    log.warning("retrying request %d to %s after timeout", rid, self.address)
        return reply

    def request_async(self, frame: bytes) -> PendingReply:
        start = time.perf_counter()
        try:
            return PendingReply(self._send(frame), start + self.latency)
        except TransportError as exc:
            return PendingReply(None, start, exc)

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def call(transport, msg_type, flags=0, sections=()) -> Frame:
    """Send one request and decode the reply, raising mapped remote errors."""
    return raise_if_error(decode_frame(transport.request(encode_frame(msg_type, flags, sections))))
