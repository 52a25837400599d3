"""Fan-out/merge master: distributes a query to every slave, merges the
rank-ordered answer streams with a loser tree, returns the global top-k
with a per-stage timing breakdown.

The merge starts only after all slaves have answered; a failure on any
slave fails the query. Per emitted result the loser tree performs at
most ceil(log2 ns) item comparisons (the tournament replay path), which
is the cost structure the capacity model charges for merging.
"""

from __future__ import annotations

import threading
import time
from dataclasses import dataclass, field

from . import netproto, qlang


class UnsortedStreamError(ValueError):
    """A merge input stream violated its rank-descending contract."""


@dataclass(frozen=True, slots=True)
class ResultItem:
    doc_key: str
    rank: float
    slave_id: int


@dataclass
class MergeStream:
    """One slave's rank-descending results feeding the merge."""

    slave_id: int
    items: tuple[tuple[str, float], ...]


class _Player:
    __slots__ = ("key", "item")

    def __init__(self, key, item):
        self.key = key
        self.item = item


class LoserTree:
    """Tournament (loser) tree merging rank-descending streams.

    ``comparisons`` counts item-vs-item comparisons made while emitting
    (the replay path after each pop): at most ceil(log2 ns) per emitted
    item. Building the initial tournament costs up to ns - 1 further
    comparisons, tracked separately in ``build_comparisons``.
    """

    def __init__(self, streams: list[MergeStream]):
        if not streams:
            raise ValueError("need at least one stream")
        self._iters = []
        self._last_rank = []
        for stream in streams:
            self._iters.append(iter(stream.items))
            self._last_rank.append(None)
        self._slave_ids = [s.slave_id for s in streams]
        n = len(streams)
        p = 1
        while p < n:
            p *= 2
        self._p = p
        self.comparisons = 0
        self.build_comparisons = 0
        self._nodes: list[_Player | None] = [None] * p  # loser slots; [0] = winner
        leaves = [self._pull(i) for i in range(n)] + [None] * (p - n)
        self._counting_build = True
        self._nodes[0] = self._play(1, leaves) if p > 1 else leaves[0]
        self._counting_build = False

    def _pull(self, slot: int) -> _Player | None:
        nxt = next(self._iters[slot], None)
        if nxt is None:
            return None
        doc_key, rank = nxt
        last = self._last_rank[slot]
        if last is not None and rank > last:
            raise UnsortedStreamError(
                f"stream {self._slave_ids[slot]} not rank-descending: {rank} after {last}"
            )
        self._last_rank[slot] = rank
        # min-ordering key: best rank first, ties by docKey then slave id;
        # docKey before slave id keeps the merge identical to a global
        # (rank desc, docKey asc) sort over the unpartitioned corpus
        return _Player((-rank, doc_key, self._slave_ids[slot]), (slot, doc_key, rank))

    def _beats(self, a: _Player | None, b: _Player | None) -> bool:
        """True if a wins the match; exhausted players lose for free."""
        if a is None:
            return False
        if b is None:
            return True
        if self._counting_build:
            self.build_comparisons += 1
        else:
            self.comparisons += 1
        return a.key < b.key

    def _play(self, node: int, leaves) -> _Player | None:
        if node >= self._p:
            return leaves[node - self._p]
        left = self._play(2 * node, leaves)
        right = self._play(2 * node + 1, leaves)
        if self._beats(left, right):
            winner, loser = left, right
        else:
            winner, loser = right, left
        self._nodes[node] = loser
        return winner

    def pop(self) -> ResultItem | None:
        winner = self._nodes[0]
        if winner is None:
            return None
        slot, doc_key, rank = winner.item
        candidate = self._pull(slot)
        node = (self._p + slot) // 2
        while node >= 1:
            stored = self._nodes[node]
            if self._beats(stored, candidate):
                self._nodes[node] = candidate
                candidate = stored
            node //= 2
        self._nodes[0] = candidate
        return ResultItem(doc_key, rank, self._slave_ids[slot])


def loser_tree_merge(streams: list[MergeStream], k: int) -> list[ResultItem]:
    """Globally rank-descending first k items across all streams."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    tree = LoserTree(streams)
    out = []
    while len(out) < k:
        item = tree.pop()
        if item is None:
            break
        out.append(item)
    return out


@dataclass
class TimingBreakdown:
    """Per-stage decomposition of one query's wall time (ms).

    nt_i is computed as round-trip minus master and slave parts rather
    than measured on the wire.
    """

    m_ms: list[float] = field(default_factory=list)
    s_ms: list[float] = field(default_factory=list)
    nt_ms: list[float] = field(default_factory=list)
    prep_ms: float = 0.0
    merge_ms: float = 0.0
    total_ms: float = 0.0

    @property
    def master_busy_ms(self) -> float:
        """Time the master actually worked (vs waited) on this query."""
        return self.prep_ms + sum(self.m_ms) + self.merge_ms

    def to_counters(self) -> dict[str, int]:
        counters = {
            "n_slaves": len(self.s_ms),
            "prep_us": int(self.prep_ms * 1000),
            "merge_us": int(self.merge_ms * 1000),
            "total_us": int(self.total_ms * 1000),
        }
        for i, (m, s, nt) in enumerate(zip(self.m_ms, self.s_ms, self.nt_ms)):
            counters[f"m_us.{i}"] = int(m * 1000)
            counters[f"s_us.{i}"] = int(s * 1000)
            counters[f"nt_us.{i}"] = max(0, int(nt * 1000))
        return counters

    @classmethod
    def from_counters(cls, counters: dict[str, int]) -> "TimingBreakdown":
        n = counters["n_slaves"]
        return cls(
            m_ms=[counters[f"m_us.{i}"] / 1000.0 for i in range(n)],
            s_ms=[counters[f"s_us.{i}"] / 1000.0 for i in range(n)],
            nt_ms=[counters[f"nt_us.{i}"] / 1000.0 for i in range(n)],
            prep_ms=counters["prep_us"] / 1000.0,
            merge_ms=counters["merge_us"] / 1000.0,
            total_ms=counters["total_us"] / 1000.0,
        )


@dataclass
class TopKResult:
    query: qlang.Query
    items: list[ResultItem]
    breakdown: TimingBreakdown


class Master:
    """Query executor over a fixed set of slave endpoints. Any number of
    queries may be in flight concurrently."""

    def __init__(self, endpoints, timeout: float = 5.0):
        self.client = netproto.FanoutClient(endpoints, timeout=timeout)

    def connect(self):
        self.client.connect()

    def execute_query(self, query: qlang.Query) -> TopKResult:
        t_start = time.perf_counter()
        # prep: validate/plan before fan-out
        query = qlang.make_query(query.keywords, query.scope, query.k)
        prep_ms = (time.perf_counter() - t_start) * 1000.0

        replies = self.client.call_all(query)

        t_merge = time.perf_counter()
        streams = [MergeStream(r.slave_id, r.items) for r in replies]
        items = loser_tree_merge(streams, query.k)
        t_end = time.perf_counter()

        breakdown = TimingBreakdown(
            m_ms=[r.m_ms for r in replies],
            s_ms=[r.s_ms for r in replies],
            nt_ms=[r.nt_ms for r in replies],
            prep_ms=prep_ms,
            merge_ms=(t_end - t_merge) * 1000.0,
            total_ms=(t_end - t_start) * 1000.0,
        )
        return TopKResult(query, items, breakdown)

    def slave_stats(self, reset: bool = False):
        return self.client.stats_all(reset=reset)

    def close(self):
        self.client.close()


class MasterServer:
    """User-facing frame server: a QUERY is answered with a TOPK frame
    followed by a STATS frame (same query id) carrying the timing
    breakdown."""

    def __init__(self, endpoints, host="127.0.0.1", port=0, concurrency: int = 16, timeout: float = 5.0):
        self.master = Master(endpoints, timeout=timeout)
        self.query_count = 0
        self._lock = threading.Lock()
        self._server = netproto.FrameServer(self._handle, host, port, concurrency)
        self.address = self._server.address

    def _handle(self, msg, arrival=None):
        if isinstance(msg, netproto.QueryMessage):
            try:
                result = self.master.execute_query(msg.to_query())
            except (netproto.FanoutError, ValueError) as exc:
                return netproto.ErrorMessage(msg.query_id, str(exc))
            with self._lock:
                self.query_count += 1
            if arrival is not None:
                # total spans from frame arrival, so the master's own
                # dispatch queueing is part of the reported response time
                result.breakdown.total_ms = (time.perf_counter() - arrival) * 1000.0
            items = tuple((it.doc_key, it.rank) for it in result.items)
            total_us = int(result.breakdown.total_ms * 1000)
            return [
                netproto.TopKMessage(msg.query_id, items, total_us),
                netproto.StatsReply(msg.query_id, result.breakdown.to_counters()),
            ]
        if isinstance(msg, netproto.PingMessage):
            return netproto.PingMessage()
        if isinstance(msg, netproto.StatsRequest):
            counters = {"queries": self.query_count}
            try:
                for i, stats in enumerate(self.master.slave_stats(reset=msg.reset)):
                    for key, value in stats.items():
                        counters[f"slave{i}.{key}"] = value
            except netproto.FanoutError as exc:
                return netproto.ErrorMessage(msg.query_id, str(exc))
            return netproto.StatsReply(msg.query_id, counters)
        qid = getattr(msg, "query_id", 0) or 0
        return netproto.ErrorMessage(qid, f"unexpected message {type(msg).__name__}")

    def start(self):
        self.master.connect()
        self._server.start()

    def serve_forever(self):
        self.master.connect()
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()
        self.master.close()


class MasterClient:
    """Client for the user-facing master protocol; safe for concurrent
    callers, multiplexing by query id."""

    def __init__(self, address, timeout: float = 30.0):
        if isinstance(address, str):
            host, port = address.rsplit(":", 1)
            address = (host, int(port))
        self.address = address
        self.timeout = timeout
        self._conn: netproto._Connection | None = None
        self._qid = 0
        self._lock = threading.Lock()

    def connect(self):
        if self._conn is None:
            self._conn = netproto._Connection(self.address, self.timeout)

    def _next_qid(self) -> int:
        with self._lock:
            self._qid += 1
            return self._qid

    def submit(self, query: qlang.Query) -> "PendingQuery":
        """Send a query without waiting; returns a handle for collect()."""
        self.connect()
        qid = self._next_qid()
        waiter = self._conn.register(qid, expect=2)  # TOPK frame + STATS frame
        try:
            self._conn.send(netproto.QueryMessage.from_query(qid, query))
        except OSError:
            self._conn.unregister(qid)
            raise
        return PendingQuery(self._conn, qid, waiter)

    def query(self, query: qlang.Query) -> tuple[list[ResultItem], TimingBreakdown]:
        return self.submit(query).collect(self.timeout)

    def stats(self, reset: bool = False) -> dict[str, int]:
        """Master query count plus per-slave counters (slave<i>.<name>)."""
        self.connect()
        qid = self._next_qid()
        waiter = self._conn.register(qid)
        try:
            self._conn.send(netproto.StatsRequest(qid, reset=reset))
            if not waiter.event.wait(self.timeout):
                raise TimeoutError("no stats reply")
            if waiter.error is not None:
                raise ConnectionError(str(waiter.error))
            msg = waiter.reply
            if isinstance(msg, netproto.ErrorMessage):
                raise RuntimeError(f"master error: {msg.message}")
            return dict(msg.counters)
        finally:
            self._conn.unregister(qid)

    def ping(self) -> bool:
        self.connect()
        self._conn.send(netproto.PingMessage())
        return True

    def close(self):
        if self._conn is not None:
            self._conn.close()
            self._conn = None


class PendingQuery:
    """Handle for an in-flight master query (TOPK + STATS reply pair)."""

    def __init__(self, conn, qid, waiter):
        self._conn = conn
        self.qid = qid
        self._waiter = waiter

    def done(self) -> bool:
        return self._waiter.event.is_set()

    @property
    def arrival(self) -> float:
        """perf_counter timestamp of the last reply frame."""
        return self._waiter.arrival

    def collect(self, timeout: float) -> tuple[list[ResultItem], TimingBreakdown]:
        try:
            if not self._waiter.event.wait(timeout):
                raise TimeoutError(f"no reply for query {self.qid} within {timeout}s")
            if self._waiter.error is not None:
                raise ConnectionError(str(self._waiter.error))
            topk = stats = None
            for msg in self._waiter.replies:
                if isinstance(msg, netproto.ErrorMessage):
                    raise RuntimeError(f"master error: {msg.message}")
                if isinstance(msg, netproto.TopKMessage):
                    topk = msg
                elif isinstance(msg, netproto.StatsReply):
                    stats = msg
            if topk is None or stats is None:
                raise RuntimeError(f"incomplete reply pair for query {self.qid}")
        finally:
            self._conn.unregister(self.qid)
        breakdown = TimingBreakdown.from_counters(stats.counters)
        items = [ResultItem(doc_key, rank, -1) for doc_key, rank in topk.items]
        return items, breakdown
