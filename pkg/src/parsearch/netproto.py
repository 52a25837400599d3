"""Length-prefixed binary wire protocol and the fan-out client.

Frame layout (length prefix in network byte order):

    u32 length | u8 msgType | payload

where length == len(payload) + 1 (it counts the msgType byte). Frames
above 16 MiB and frames with a declared length of 0 are rejected.

Message types:

    QUERY=1   qid u64 | sct u8 | k u32 | nkw u16 | nkw * str |
              scope u8 (0 none, 1 siteId, 2 domainId) | [value i64]
    TOPK=2    qid u64 | nitems u32 | nitems * (docKey str, rank f64) |
              slave time u64 (microseconds)
    PING=3    empty
    ERROR=4   qid u64 | message str
    STATS=5   qid u64 | kind u8; request: flags u8 (bit0 = reset after
              report); reply: n u16 | n * (key str, value u64)

Strings are u16 length + UTF-8 bytes. Integers are big-endian. TOPK
items must be rank-descending; the decoder enforces it.

The fan-out client keeps one byte-stream connection per slave, issues a
query to every slave before waiting on any response, and multiplexes
concurrent queries over each connection by query id, so out-of-order
responses are fine. A failure on any slave fails the whole call with the
endpoint named.
"""

from __future__ import annotations

import itertools
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from . import qlang

MAX_FRAME_LEN = 16 * 1024 * 1024

MSG_QUERY = 1
MSG_TOPK = 2
MSG_PING = 3
MSG_ERROR = 4
MSG_STATS = 5

SCT_CODES = {qlang.SINGLE: 1, qlang.MULTI: 2, qlang.LIMITED: 3}
SCT_NAMES = {v: k for k, v in SCT_CODES.items()}
SCOPE_CODES = {None: 0, "siteId": 1, "domainId": 2}
SCOPE_NAMES = {1: "siteId", 2: "domainId"}


class ProtocolError(ValueError):
    """Malformed frame or payload."""


class ConnectionClosedError(ProtocolError):
    """Peer closed the stream mid-frame."""


class FanoutError(RuntimeError):
    """A fan-out call failed; names the offending endpoint."""

    def __init__(self, endpoint, message):
        super().__init__(f"slave {endpoint[0]}:{endpoint[1]}: {message}")
        self.endpoint = endpoint


@dataclass(frozen=True)
class QueryMessage:
    query_id: int
    condition_type: str
    keywords: tuple[str, ...]
    scope: tuple[str, int] | None
    k: int

    @classmethod
    def from_query(cls, query_id: int, query: qlang.Query) -> "QueryMessage":
        return cls(query_id, query.condition_type, query.keywords, query.scope, query.k)

    def to_query(self) -> qlang.Query:
        return qlang.Query(self.condition_type, self.keywords, self.scope, self.k)


@dataclass(frozen=True)
class TopKMessage:
    query_id: int
    items: tuple[tuple[str, float], ...]  # (docKey, rank), rank-descending
    slave_us: int


@dataclass(frozen=True)
class PingMessage:
    pass


@dataclass(frozen=True)
class ErrorMessage:
    query_id: int
    message: str


@dataclass(frozen=True)
class StatsRequest:
    query_id: int
    reset: bool = False


@dataclass(frozen=True)
class StatsReply:
    query_id: int
    counters: dict[str, int] = field(default_factory=dict)


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError(f"string too long: {len(raw)} bytes")
    return struct.pack(">H", len(raw)) + raw


class _PayloadReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def unpack(self, fmt: str):
        end = self.pos + struct.calcsize(fmt)
        if end > len(self.data):
            raise ProtocolError("payload truncated")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos = end
        return values

    def read_str(self) -> str:
        (n,) = self.unpack(">H")
        end = self.pos + n
        if end > len(self.data):
            raise ProtocolError("payload truncated")
        raw = self.data[self.pos : end]
        self.pos = end
        return raw.decode("utf-8")

    def done(self):
        if self.pos != len(self.data):
            raise ProtocolError(f"{len(self.data) - self.pos} trailing payload bytes")


def _encode_payload(msg) -> tuple[int, bytes]:
    if isinstance(msg, QueryMessage):
        out = [struct.pack(">QBI", msg.query_id, SCT_CODES[msg.condition_type], msg.k)]
        out.append(struct.pack(">H", len(msg.keywords)))
        out.extend(_pack_str(kw) for kw in msg.keywords)
        if msg.scope is None:
            out.append(struct.pack(">B", 0))
        else:
            field_name, value = msg.scope
            out.append(struct.pack(">Bq", SCOPE_CODES[field_name], value))
        return MSG_QUERY, b"".join(out)
    if isinstance(msg, TopKMessage):
        out = [struct.pack(">QI", msg.query_id, len(msg.items))]
        for doc_key, rank in msg.items:
            out.append(_pack_str(doc_key))
            out.append(struct.pack(">d", rank))
        out.append(struct.pack(">Q", msg.slave_us))
        return MSG_TOPK, b"".join(out)
    if isinstance(msg, PingMessage):
        return MSG_PING, b""
    if isinstance(msg, ErrorMessage):
        return MSG_ERROR, struct.pack(">Q", msg.query_id) + _pack_str(msg.message)
    if isinstance(msg, StatsRequest):
        return MSG_STATS, struct.pack(">QBB", msg.query_id, 0, 1 if msg.reset else 0)
    if isinstance(msg, StatsReply):
        out = [struct.pack(">QBH", msg.query_id, 1, len(msg.counters))]
        for key, value in msg.counters.items():
            out.append(_pack_str(key))
            out.append(struct.pack(">Q", value))
        return MSG_STATS, b"".join(out)
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def encode_frame(msg) -> bytes:
    msg_type, payload = _encode_payload(msg)
    length = len(payload) + 1
    if length > MAX_FRAME_LEN:
        raise ProtocolError(f"frame too large: {length} bytes")
    return struct.pack(">IB", length, msg_type) + payload


def decode_frame(data: bytes):
    """Decode one complete frame; decode_frame(encode_frame(m)) == m."""
    if len(data) < 5:
        raise ProtocolError(f"frame too short: {len(data)} bytes")
    length, msg_type = struct.unpack_from(">IB", data)
    if length == 0:
        raise ProtocolError("declared frame length 0")
    if length > MAX_FRAME_LEN:
        raise ProtocolError(f"declared frame length {length} exceeds limit")
    if len(data) != 4 + length:
        raise ProtocolError(f"frame length mismatch: declared {length}, got {len(data) - 4}")
    return _decode_payload(msg_type, data[5:])


def _decode_payload(msg_type: int, payload: bytes):
    r = _PayloadReader(payload)
    if msg_type == MSG_QUERY:
        qid, sct, k = r.unpack(">QBI")
        if sct not in SCT_NAMES:
            raise ProtocolError(f"unknown search condition type {sct}")
        (nkw,) = r.unpack(">H")
        keywords = tuple(r.read_str() for _ in range(nkw))
        (scope_code,) = r.unpack(">B")
        scope = None
        if scope_code:
            if scope_code not in SCOPE_NAMES:
                raise ProtocolError(f"unknown scope field code {scope_code}")
            (value,) = r.unpack(">q")
            scope = (SCOPE_NAMES[scope_code], value)
        r.done()
        return QueryMessage(qid, SCT_NAMES[sct], keywords, scope, k)
    if msg_type == MSG_TOPK:
        qid, nitems = r.unpack(">QI")
        items = []
        for _ in range(nitems):
            doc_key = r.read_str()
            (rank,) = r.unpack(">d")
            items.append((doc_key, rank))
        (slave_us,) = r.unpack(">Q")
        r.done()
        for (_, a), (_, b) in zip(items, items[1:]):
            if b > a:
                raise ProtocolError("top-k items not rank-descending")
        return TopKMessage(qid, tuple(items), slave_us)
    if msg_type == MSG_PING:
        r.done()
        return PingMessage()
    if msg_type == MSG_ERROR:
        (qid,) = r.unpack(">Q")
        message = r.read_str()
        r.done()
        return ErrorMessage(qid, message)
    if msg_type == MSG_STATS:
        qid, kind = r.unpack(">QB")
        if kind == 0:
            (flags,) = r.unpack(">B")
            r.done()
            return StatsRequest(qid, reset=bool(flags & 1))
        if kind == 1:
            (n,) = r.unpack(">H")
            counters = {}
            for _ in range(n):
                key = r.read_str()
                (value,) = r.unpack(">Q")
                counters[key] = value
            r.done()
            return StatsReply(qid, counters)
        raise ProtocolError(f"unknown stats kind {kind}")
    raise ProtocolError(f"unknown message type {msg_type}")


def send_frame(sock: socket.socket, msg):
    sock.sendall(encode_frame(msg))


def recv_exact(sock: socket.socket, n: int) -> bytes:
    parts = []
    remaining = n
    while remaining:
        chunk = sock.recv(remaining)
        if not chunk:
            raise ConnectionClosedError("connection closed mid-frame")
        parts.append(chunk)
        remaining -= len(chunk)
    return b"".join(parts)


def read_frame(sock: socket.socket):
    header = recv_exact(sock, 4)
    (length,) = struct.unpack(">I", header)
    if length == 0:
        raise ProtocolError("declared frame length 0")
    if length > MAX_FRAME_LEN:
        raise ProtocolError(f"declared frame length {length} exceeds limit")
    body = recv_exact(sock, length)
    return _decode_payload(body[0], body[1:])


@dataclass
class SlaveReply:
    """One slave's answer to a fanned-out query, with timing."""

    endpoint: tuple[str, int]
    slave_id: int
    items: tuple[tuple[str, float], ...]
    s_ms: float        # slave-reported processing time
    m_ms: float        # master-side handling for this slave (send + decode)
    rtt_ms: float      # send start to response arrival

    @property
    def nt_ms(self) -> float:
        """Residual network/transfer time: rtt minus master and slave parts."""
        return self.rtt_ms - self.m_ms - self.s_ms


class _Waiter:
    """Pending-reply slot; completes after ``expect`` frames (or the
    first ERROR frame, or a connection failure)."""

    __slots__ = ("event", "replies", "error", "decode_ms", "arrival", "expect")

    def __init__(self, expect: int = 1):
        self.event = threading.Event()
        self.replies: list = []
        self.error: Exception | None = None
        self.decode_ms = 0.0
        self.arrival = 0.0
        self.expect = expect

    @property
    def reply(self):
        return self.replies[0] if self.replies else None


class _Connection:
    def __init__(self, endpoint, timeout):
        self.endpoint = endpoint
        self.sock = socket.create_connection(endpoint, timeout=timeout)
        self.sock.settimeout(None)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.send_lock = threading.Lock()
        self.pending: dict[int, _Waiter] = {}
        self.pending_lock = threading.Lock()
        self.closed = False
        self.reader = threading.Thread(target=self._read_loop, daemon=True)
        self.reader.start()

    def _read_loop(self):
        try:
            while True:
                header = recv_exact(self.sock, 4)
                (length,) = struct.unpack(">I", header)
                if length == 0 or length > MAX_FRAME_LEN:
                    raise ProtocolError(f"bad frame length {length}")
                body = recv_exact(self.sock, length)
                arrival = time.perf_counter()
                t0 = arrival
                msg = _decode_payload(body[0], body[1:])
                decode_ms = (time.perf_counter() - t0) * 1000.0
                qid = getattr(msg, "query_id", None)
                if qid is None:
                    continue  # unsolicited PING or similar
                with self.pending_lock:
                    waiter = self.pending.get(qid)
                if waiter is None:
                    continue
                waiter.replies.append(msg)
                waiter.decode_ms += decode_ms
                waiter.arrival = arrival
                if len(waiter.replies) >= waiter.expect or isinstance(msg, ErrorMessage):
                    waiter.event.set()
        except Exception as exc:  # noqa: BLE001 - fail all in-flight calls
            with self.pending_lock:
                self.closed = True
                waiters = list(self.pending.values())
            for waiter in waiters:
                waiter.error = exc
                waiter.event.set()

    def register(self, qid: int, expect: int = 1) -> _Waiter:
        waiter = _Waiter(expect)
        with self.pending_lock:
            if self.closed:
                raise FanoutError(self.endpoint, "connection closed")
            self.pending[qid] = waiter
        return waiter

    def unregister(self, qid: int):
        with self.pending_lock:
            self.pending.pop(qid, None)

    def send(self, msg):
        with self.send_lock:
            self.sock.sendall(encode_frame(msg))

    def close(self):
        with self.pending_lock:
            self.closed = True
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class FrameServer:
    """Threaded TCP server speaking this module's frame protocol.

    ``handler(msg, arrival) -> reply | list of replies | None`` runs on
    a bounded worker pool, so several messages from one connection can
    be in flight at once and replies may go out of order (callers
    multiplex by query id). ``arrival`` is the perf_counter timestamp at
    which the frame was read off the socket, so handlers can report
    sojourn times that include their own queueing. A payload-level
    decode error answers with an ERROR frame and keeps the connection; a
    framing-level error drops the connection. Handler exceptions never
    kill the serve loop.
    """

    def __init__(self, handler, host: str = "127.0.0.1", port: int = 0, concurrency: int = 8):
        import concurrent.futures
        import socketserver

        self.handler = handler
        self._pool = concurrent.futures.ThreadPoolExecutor(max_workers=max(1, concurrency))
        server_self = self

        class _Handler(socketserver.BaseRequestHandler):
            def handle(self):
                sock = self.request
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                write_lock = threading.Lock()
                while True:
                    try:
                        msg = read_frame(sock)
                    except ConnectionClosedError:
                        return
                    except ProtocolError as exc:
                        try:
                            with write_lock:
                                send_frame(sock, ErrorMessage(0, f"protocol error: {exc}"))
                        except OSError:
                            return
                        continue
                    except OSError:
                        return
                    arrival = time.perf_counter()
                    server_self._pool.submit(server_self._dispatch, sock, write_lock, msg, arrival)

        class _Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        try:
            self._server = _Server((host, port), _Handler)
        except OSError as exc:
            raise RuntimeError(f"cannot bind {host}:{port}: {exc}") from exc
        self.address = self._server.server_address
        self._thread: threading.Thread | None = None

    def _dispatch(self, sock, write_lock, msg, arrival):
        try:
            replies = self.handler(msg, arrival)
        except Exception as exc:  # noqa: BLE001 - the serve loop must survive
            qid = getattr(msg, "query_id", 0) or 0
            replies = ErrorMessage(qid, f"{type(exc).__name__}: {exc}")
        if replies is None:
            return
        if not isinstance(replies, list):
            replies = [replies]
        # one send for multi-frame replies: atomic under the lock and
        # avoids trickling tiny segments
        data = b"".join(encode_frame(reply) for reply in replies)
        try:
            with write_lock:
                sock.sendall(data)
        except OSError:
            pass

    def start(self):
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self):
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        self._pool.shutdown(wait=False)
        if self._thread is not None:
            self._thread.join(timeout=5)


class FanoutClient:
    """Asynchronous fan-out over persistent connections to every slave.

    Safe for concurrent callers; each call gets a fresh query id and the
    per-connection reader threads route responses back by id.
    """

    def __init__(self, endpoints, timeout: float = 5.0):
        if not endpoints:
            raise ValueError("need at least one slave endpoint")
        self.endpoints = [self._parse(e) for e in endpoints]
        self.timeout = timeout
        self._conns: list[_Connection] | None = None
        self._qid = itertools.count(1)
        self._qid_lock = threading.Lock()

    @staticmethod
    def _parse(endpoint):
        if isinstance(endpoint, str):
            host, port = endpoint.rsplit(":", 1)
            return host, int(port)
        return endpoint

    def connect(self):
        if self._conns is not None:
            return
        conns = []
        for endpoint in self.endpoints:
            try:
                conns.append(_Connection(endpoint, self.timeout))
            except OSError as exc:
                for c in conns:
                    c.close()
                raise FanoutError(endpoint, f"cannot connect: {exc}") from exc
        self._conns = conns

    def next_query_id(self) -> int:
        with self._qid_lock:
            return next(self._qid)

    def call_all(self, query: qlang.Query) -> list[SlaveReply]:
        """Issue the query to every slave, then wait for all responses.

        Requests go out back to back with no intervening waits, so the
        call completes in roughly the slowest slave's time, not the sum.
        """
        self.connect()
        qid = self.next_query_id()
        msg_proto = QueryMessage.from_query(qid, query)
        waiters = []
        send_times = []
        for conn in self._conns:
            waiter = conn.register(qid)
            t0 = time.perf_counter()
            try:
                conn.send(msg_proto)
            except OSError as exc:
                self._unregister_all(qid)
                raise FanoutError(conn.endpoint, f"send failed: {exc}") from exc
            send_ms = (time.perf_counter() - t0) * 1000.0
            waiters.append(waiter)
            send_times.append((t0, send_ms))

        deadline = time.monotonic() + self.timeout
        replies = []
        try:
            for slave_id, (conn, waiter) in enumerate(zip(self._conns, waiters)):
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not waiter.event.wait(remaining):
                    raise FanoutError(conn.endpoint, f"timeout after {self.timeout}s")
                if waiter.error is not None:
                    raise FanoutError(conn.endpoint, str(waiter.error))
                msg = waiter.reply
                if isinstance(msg, ErrorMessage):
                    raise FanoutError(conn.endpoint, msg.message)
                if not isinstance(msg, TopKMessage):
                    raise FanoutError(conn.endpoint, f"unexpected reply {type(msg).__name__}")
                t0, send_ms = send_times[slave_id]
                replies.append(
                    SlaveReply(
                        endpoint=conn.endpoint,
                        slave_id=slave_id,
                        items=msg.items,
                        s_ms=msg.slave_us / 1000.0,
                        m_ms=send_ms + waiter.decode_ms,
                        rtt_ms=(waiter.arrival - t0) * 1000.0,
                    )
                )
        finally:
            self._unregister_all(qid)
        return replies

    def _unregister_all(self, qid):
        for conn in self._conns:
            conn.unregister(qid)

    def stats_all(self, reset: bool = False) -> list[dict[str, int]]:
        self.connect()
        qid = self.next_query_id()
        out = []
        for conn in self._conns:
            waiter = conn.register(qid)
            try:
                conn.send(StatsRequest(qid, reset=reset))
                if not waiter.event.wait(self.timeout):
                    raise FanoutError(conn.endpoint, "stats timeout")
                if waiter.error is not None:
                    raise FanoutError(conn.endpoint, str(waiter.error))
                if not isinstance(waiter.reply, StatsReply):
                    raise FanoutError(conn.endpoint, "unexpected stats reply")
                out.append(dict(waiter.reply.counters))
            finally:
                conn.unregister(qid)
        return out

    def close(self):
        if self._conns is not None:
            for conn in self._conns:
                conn.close()
            self._conns = None

    def __enter__(self):
        self.connect()
        return self

    def __exit__(self, *exc):
        self.close()
