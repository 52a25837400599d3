"""Shared-nothing storage/query node: owns one corpus segment.

Serves QUERY frames against an immutable index handle, answering with
the segment-local top-k and the slave processing time. PING echoes,
STATS reports query and buffer-pool counters (optionally resetting
them). A malformed query gets an ERROR frame; the serve loop survives
anything a request can throw at it.
"""

from __future__ import annotations

import signal
import threading
import time

from . import ircore, netproto


def handle_query(index, msg: netproto.QueryMessage, arrival: float | None = None) -> netproto.TopKMessage:
    """Run one query against the local segment.

    s_i is the slave sojourn: wall time from the frame's arrival (or
    from dispatch when no arrival timestamp is given) to having the
    results ready, in microseconds. Internal queueing counts, which is
    what the capacity model's slave samples mean.
    """
    t0 = time.perf_counter() if arrival is None else arrival
    query = msg.to_query()
    items = ircore.search(index, query)
    slave_us = int((time.perf_counter() - t0) * 1e6)
    wire_items = tuple((it.doc_key, it.rank) for it in items)
    return netproto.TopKMessage(msg.query_id, wire_items, slave_us)


class SlaveServer:
    def __init__(self, index, host="127.0.0.1", port=0, concurrency: int = 8):
        self.index = index
        self.query_count = 0
        self.error_count = 0
        self._count_lock = threading.Lock()
        self._server = netproto.FrameServer(self._handle, host, port, concurrency)
        self.address = self._server.address

    def _handle(self, msg, arrival=None):
        if isinstance(msg, netproto.QueryMessage):
            try:
                reply = handle_query(self.index, msg, arrival)
            except Exception as exc:  # noqa: BLE001 - answer, don't die
                with self._count_lock:
                    self.error_count += 1
                return netproto.ErrorMessage(msg.query_id, f"{type(exc).__name__}: {exc}")
            with self._count_lock:
                self.query_count += 1
            return reply
        if isinstance(msg, netproto.PingMessage):
            return netproto.PingMessage()
        if isinstance(msg, netproto.StatsRequest):
            counters = {"queries": self.query_count, "errors": self.error_count}
            if hasattr(self.index, "buffer_stats"):
                counters.update(self.index.buffer_stats())
            reply = netproto.StatsReply(msg.query_id, counters)
            if msg.reset:
                self.reset_counters()
            return reply
        qid = getattr(msg, "query_id", 0) or 0
        return netproto.ErrorMessage(qid, f"unexpected message {type(msg).__name__}")

    def reset_counters(self):
        with self._count_lock:
            self.query_count = 0
            self.error_count = 0
        pool = getattr(self.index, "pool", None)
        if pool is not None:
            pool.reset_counters()

    def start(self):
        self._server.start()

    def serve_forever(self):
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()


def serve(listen: str, index_path: str, buffer_bytes: int, concurrency: int = 8) -> int:
    """CLI entry: load the segment and serve until SIGINT/SIGTERM."""
    from . import storage

    host, port = listen.rsplit(":", 1)
    index = storage.load_index(index_path, buffer_bytes)
    try:
        server = SlaveServer(index, host, int(port), concurrency)
    except RuntimeError as exc:
        index.close()
        print(f"slave: {exc}")
        return 2
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    server.start()
    print(f"slave: serving {index_path} on {server.address[0]}:{server.address[1]}", flush=True)
    stop.wait()
    server.shutdown()
    index.close()
    return 0
