"""Storing-nodes and the query coordinator.

One StoringNode hosts one tree and answers shard-local queries. The
coordinator combines the two querying roles: admission (assign a query ID
before any evaluation) and reply handling (consult the cache, fan out to
shards, collect partials until complete or deadline, merge, answer in
query-ID order). A cache hit suppresses fan-out entirely; any acknowledged
insert invalidates the whole cache, so a hit always equals fresh evaluation.
"""

from __future__ import annotations

import itertools
import struct
import threading
from collections import OrderedDict
from concurrent.futures import Future
from dataclasses import dataclass, field, replace

from .fabric import FabricError
from .model import (
    CaseRecord,
    KnnQuery,
    Neighbor,
    Point,
    Query,
    QueryResult,
    RangeQuery,
    Rect,
    rect_union,
)
from .protocol import (
    KIND_KNN,
    KIND_RANGE,
    Envelope,
    ErrorMessage,
    InsertAck,
    InsertRecord,
    QueryAck,
    QueryComplete,
    QuerySubmit,
    ShardQuery,
    ShardResult,
)
from .rplustree import DuplicateRecordError, RPlusTree

DEFAULT_TIMEOUT = 5.0
DEFAULT_CACHE_CAPACITY = 1024

ERR_DUPLICATE = 1
ERR_MALFORMED = 2
ERR_INTERNAL = 3


class ClusterError(Exception):
    pass


class MergeInvariantError(ClusterError):
    """A shard partial arrived unsorted; internal invariant breach."""


# -- merging -----------------------------------------------------------------


def merge_knn(partials: list[list[Neighbor]], k: int) -> list[Neighbor]:
    """Globally best min(k, total) neighbors under (distance, record_id)."""
    for part in partials:
        keys = [(n.distance, n.record_id) for n in part]
        if keys != sorted(keys):
            raise MergeInvariantError("unsorted KNN partial")
    merged = sorted(
        itertools.chain.from_iterable(partials),
        key=lambda n: (n.distance, n.record_id),
    )
    out: list[Neighbor] = []
    seen: set[int] = set()
    for n in merged:
        if len(out) >= k:
            break
        if n.record_id in seen:
            continue  # impossible under disjoint shards; defensive
        seen.add(n.record_id)
        out.append(n)
    return out


def merge_range(partials: list[list[int]]) -> tuple[list[int], int]:
    """Sorted union of shard id lists; returns (ids, duplicates_removed)."""
    for part in partials:
        if list(part) != sorted(part):
            raise MergeInvariantError("unsorted range partial")
    out: list[int] = []
    dupes = 0
    for rid in sorted(itertools.chain.from_iterable(partials)):
        if out and out[-1] == rid:
            dupes += 1
        else:
            out.append(rid)
    return out, dupes


# -- result cache ------------------------------------------------------------


def cache_key(query: Query) -> bytes:
    """Canonical exact-bit key: kind, center coordinate bits, k or radius bits."""
    if isinstance(query, KnnQuery):
        head = struct.pack(">BQ", KIND_KNN, query.k)
    else:
        head = struct.pack(">Bd", KIND_RANGE, query.radius)
    return head + struct.pack(f">{query.center.dim}d", *query.center.coords)


class QueryCache:
    """LRU map from canonical query key to a completed QueryResult."""

    def __init__(self, capacity: int = DEFAULT_CACHE_CAPACITY):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self._entries: OrderedDict[bytes, QueryResult] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    def lookup(self, query: Query) -> QueryResult | None:
        key = cache_key(query)
        with self._lock:
            result = self._entries.get(key)
            if result is None:
                self.misses += 1
                return None
            self._entries.move_to_end(key)
            self.hits += 1
            return result

    def insert(self, query: Query, result: QueryResult) -> None:
        if self.capacity == 0:
            return
        key = cache_key(query)
        with self._lock:
            self._entries[key] = result
            self._entries.move_to_end(key)
            while len(self._entries) > self.capacity:
                self._entries.popitem(last=False)

    def invalidate_all(self) -> None:
        with self._lock:
            self._entries.clear()

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# -- storing node ------------------------------------------------------------

BUILDING = "building"
READY = "ready"


class StoringNode:
    """One shard: a node name on the fabric plus its single tree."""

    def __init__(self, node_id: int, tree: RPlusTree, fabric, name: str | None = None):
        self.node_id = node_id
        self.tree = tree
        self.name = name if name is not None else f"shard-{node_id}"
        self.state = BUILDING
        self._fabric = fabric
        self._msg_ids = itertools.count(1)
        self._write_lock = threading.Lock()
        fabric.register(self.name, self.handle)

    def ready(self) -> None:
        self.state = READY

    def handle(self, env: Envelope) -> None:
        msg = env.payload
        if isinstance(msg, ShardQuery):
            if self.state != READY:
                self._reply(env, ErrorMessage(ERR_INTERNAL, f"{self.name} not ready"))
                return
            query = msg.query
            if isinstance(query, KnnQuery):
                hits = tuple(self.tree.knn_query(query.center, query.k))
                kind = KIND_KNN
            else:
                hits = tuple(self.tree.range_query(query.center, query.radius))
                kind = KIND_RANGE
            self._reply(env, ShardResult(msg.query_id, self.node_id, kind, hits))
        elif isinstance(msg, InsertRecord):
            try:
                with self._write_lock:
                    self.tree.insert(msg.record)
            except DuplicateRecordError as exc:
                self._reply(env, ErrorMessage(ERR_DUPLICATE, str(exc)))
            except Exception as exc:
                self._reply(env, ErrorMessage(ERR_INTERNAL, str(exc)))
            else:
                self._reply(env, InsertAck(self.node_id))

    def _reply(self, request: Envelope, payload) -> None:
        env = Envelope(next(self._msg_ids), request.correlation_id, self.name, payload)
        try:
            self._fabric.send(request.sender, env)
        except FabricError:
            pass  # requester unreachable; it will time out


# -- coordinator -------------------------------------------------------------


def make_query_id(client_id: int, sequence: int) -> int:
    """64-bit query id: client in the high 32 bits, per-client sequence low."""
    if not 0 <= client_id < 2**32:
        raise ValueError(f"client_id out of 32-bit range: {client_id}")
    return (client_id << 32) | (sequence & 0xFFFFFFFF)


@dataclass
class ShardInfo:
    node_id: int
    name: str
    count: int
    mbr: Rect | None
    state: str = READY


@dataclass
class PendingEntry:
    query_id: int
    query: Query
    expected: set[int] = field(default_factory=set)
    received: dict[int, tuple] = field(default_factory=dict)
    unreachable: set[int] = field(default_factory=set)
    future: Future = field(default_factory=Future)
    timer: threading.Timer | None = None
    done: bool = False


class Coordinator:
    """Receiving-node and replying-node co-located in one process.

    The role boundary stays a message boundary: shard traffic always crosses
    the fabric, and remote clients may drive the coordinator purely through
    QuerySubmit / InsertRecord envelopes.
    """

    def __init__(
        self,
        fabric,
        name: str = "coordinator",
        strategy: str = "chunk",
        timeout: float = DEFAULT_TIMEOUT,
        cache_capacity: int = DEFAULT_CACHE_CAPACITY,
        verify_cache_hits: bool = False,
    ):
        if strategy not in ("chunk", "spatial"):
            raise ValueError(f"unknown routing strategy {strategy!r}")
        self.name = name
        self.strategy = strategy
        self.timeout = timeout
        self.cache = QueryCache(cache_capacity)
        self.verify_cache_hits = verify_cache_hits
        self._fabric = fabric
        self._shards: dict[int, ShardInfo] = {}
        self._known_ids: set[int] = set()
        self._pending: dict[int, PendingEntry] = {}
        self._insert_waiters: dict[int, Future] = {}
        self._client_seq: dict[int, int] = {}
        self._remote_clients: dict[str, int] = {}
        self._msg_ids = itertools.count(1)
        self._lock = threading.Lock()
        fabric.register(name, self.handle)

    # -- cluster membership --------------------------------------------------

    def register_shard(
        self,
        node_id: int,
        name: str,
        count: int = 0,
        mbr: Rect | None = None,
        record_ids=None,
    ) -> None:
        with self._lock:
            if node_id in self._shards:
                raise ClusterError(f"shard {node_id} already registered")
            self._shards[node_id] = ShardInfo(node_id, name, count, mbr)
            if record_ids is not None:
                self._known_ids.update(record_ids)

    def ready_shards(self) -> list[ShardInfo]:
        with self._lock:
            return [s for s in self._shards.values() if s.state == READY]

    # -- queries -------------------------------------------------------------

    def submit_query(self, client_id: int, query: Query) -> tuple[int, Future]:
        """Assign an ID (before any evaluation) and start the answer."""
        if not isinstance(query, (KnnQuery, RangeQuery)):
            raise ValueError(f"malformed query: {query!r}")
        with self._lock:
            seq = self._client_seq.get(client_id, 0)
            self._client_seq[client_id] = seq + 1
        query_id = make_query_id(client_id, seq)
        entry = PendingEntry(query_id, query)

        cached = self.cache.lookup(query)
        if cached is not None and not self.verify_cache_hits:
            entry.done = True
            entry.future.set_result(replace(cached, query_id=query_id, from_cache=True))
            return query_id, entry.future

        shards = self.ready_shards()
        if not shards:
            entry.done = True
            entry.future.set_result(QueryResult(query_id, hits=(), shard_count=0))
            return query_id, entry.future

        entry.expected = {s.node_id for s in shards}
        with self._lock:
            self._pending[query_id] = entry
        if cached is not None:
            entry.verify_against = cached  # type: ignore[attr-defined]
        for shard in shards:
            env = Envelope(
                next(self._msg_ids), query_id, self.name, ShardQuery(query_id, query)
            )
            try:
                self._fabric.send(shard.name, env)
            except FabricError:
                with self._lock:
                    entry.unreachable.add(shard.node_id)
        entry.timer = threading.Timer(self.timeout, self._deadline, args=(query_id,))
        entry.timer.daemon = True
        entry.timer.start()
        with self._lock:
            self._maybe_complete(entry)
        return query_id, entry.future

    def query(self, client_id: int, query: Query, timeout: float | None = None) -> QueryResult:
        _, future = self.submit_query(client_id, query)
        return future.result(timeout=timeout if timeout is not None else self.timeout + 5)

    def _deadline(self, query_id: int) -> None:
        with self._lock:
            entry = self._pending.get(query_id)
            if entry is None or entry.done:
                return
            self._finish(entry, degraded=True)

    def _maybe_complete(self, entry: PendingEntry) -> None:
        # caller holds the lock
        if entry.done:
            return
        outstanding = entry.expected - set(entry.received) - entry.unreachable
        if not outstanding:
            self._finish(entry, degraded=bool(entry.unreachable))

    def _finish(self, entry: PendingEntry, degraded: bool) -> None:
        # caller holds the lock
        entry.done = True
        self._pending.pop(entry.query_id, None)
        if entry.timer is not None:
            entry.timer.cancel()
        missing = tuple(
            sorted((entry.expected - set(entry.received)) | entry.unreachable)
        )
        partials = [entry.received[n] for n in sorted(entry.received)]
        dupes = 0
        if isinstance(entry.query, KnnQuery):
            hits = tuple(merge_knn([list(p) for p in partials], entry.query.k))
        else:
            ids, dupes = merge_range([list(p) for p in partials])
            hits = tuple(ids)
        result = QueryResult(
            query_id=entry.query_id,
            hits=hits,
            from_cache=False,
            shard_count=len(entry.expected),
            degraded=degraded or bool(missing),
            missing_nodes=missing,
            duplicates_removed=dupes,
        )
        if not result.degraded:
            self.cache.insert(entry.query, result)
        cached = getattr(entry, "verify_against", None)
        if cached is not None and not result.degraded:
            if cached.hits != result.hits:
                entry.future.set_exception(
                    ClusterError(
                        f"cache verification failed for query {entry.query_id}: "
                        f"cached {cached.hits!r} != fresh {result.hits!r}"
                    )
                )
                return
            result = replace(result, from_cache=True)
        entry.future.set_result(result)

    # -- inserts -------------------------------------------------------------

    def insert(self, rec: CaseRecord, timeout: float | None = None) -> int:
        """Route one record to a shard; returns the acknowledged node id."""
        with self._lock:
            if rec.record_id in self._known_ids:
                raise DuplicateRecordError([rec.record_id])
            shard = self._route(rec.position)
            if shard is None:
                raise ClusterError("no ready shard to insert into")
            correlation = next(self._msg_ids) | (1 << 62)  # disjoint from query ids
            waiter: Future = Future()
            self._insert_waiters[correlation] = waiter
        env = Envelope(
            next(self._msg_ids), correlation, self.name, InsertRecord(rec)
        )
        try:
            self._fabric.send(shard.name, env)
        except FabricError as exc:
            with self._lock:
                self._insert_waiters.pop(correlation, None)
            raise ClusterError(f"shard {shard.node_id} unreachable: {exc}") from exc
        node_id = waiter.result(timeout=timeout if timeout is not None else self.timeout)
        with self._lock:
            info = self._shards[node_id]
            info.count += 1
            box = Rect.around(rec.position)
            info.mbr = box if info.mbr is None else rect_union(info.mbr, box)
            self._known_ids.add(rec.record_id)
        self.cache.invalidate_all()
        return node_id

    # routing-rule entry point under its operational name
    route_insert = insert

    def _route(self, position: Point) -> ShardInfo | None:
        # caller holds the lock
        ready = [s for s in self._shards.values() if s.state == READY]
        if not ready:
            return None
        if self.strategy == "chunk":
            return min(ready, key=lambda s: (s.count, s.node_id))
        from .model import mindist

        containing = [
            s for s in ready if s.mbr is not None and s.mbr.contains_point(position)
        ]
        if containing:
            return min(containing, key=lambda s: s.node_id)
        with_mbr = [s for s in ready if s.mbr is not None]
        if with_mbr:
            return min(
                with_mbr, key=lambda s: (mindist(position, s.mbr), s.node_id)
            )
        return min(ready, key=lambda s: s.node_id)

    # -- fabric handler ------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        msg = env.payload
        if isinstance(msg, ShardResult):
            with self._lock:
                entry = self._pending.get(msg.query_id)
                if entry is None or entry.done or msg.node_id in entry.received:
                    return
                entry.received[msg.node_id] = msg.hits
                self._maybe_complete(entry)
        elif isinstance(msg, InsertAck):
            with self._lock:
                waiter = self._insert_waiters.pop(env.correlation_id, None)
            if waiter is not None:
                waiter.set_result(msg.node_id)
        elif isinstance(msg, ErrorMessage):
            with self._lock:
                waiter = self._insert_waiters.pop(env.correlation_id, None)
            if waiter is not None:
                exc: Exception
                if msg.code == ERR_DUPLICATE:
                    exc = DuplicateRecordError(
                        [int(t) for t in msg.text.replace("[", " ").replace("]", " ").split() if t.isdigit()]
                        or [0]
                    )
                else:
                    exc = ClusterError(msg.text)
                waiter.set_exception(exc)
        elif isinstance(msg, QuerySubmit):
            self._handle_remote_submit(env, msg)
        elif isinstance(msg, InsertRecord):
            self._handle_remote_insert(env, msg)

    def _handle_remote_submit(self, env: Envelope, msg: QuerySubmit) -> None:
        with self._lock:
            client_id = self._remote_clients.setdefault(
                env.sender, len(self._remote_clients) + 1
            )
        sender = env.sender
        try:
            query_id, future = self.submit_query(client_id, msg.query)
        except ValueError as exc:
            self._send(
                sender, env.correlation_id, ErrorMessage(ERR_MALFORMED, str(exc))
            )
            return
        self._send(sender, env.correlation_id, QueryAck(query_id))
        future.add_done_callback(
            lambda f: self._send(sender, query_id, QueryComplete(f.result()))
        )

    def _handle_remote_insert(self, env: Envelope, msg: InsertRecord) -> None:
        try:
            node_id = self.insert(msg.record)
        except DuplicateRecordError as exc:
            self._send(env.sender, env.correlation_id, ErrorMessage(ERR_DUPLICATE, str(exc)))
        except Exception as exc:
            self._send(env.sender, env.correlation_id, ErrorMessage(ERR_INTERNAL, str(exc)))
        else:
            self._send(env.sender, env.correlation_id, InsertAck(node_id))

    def _send(self, dest: str, correlation_id: int, payload) -> None:
        env = Envelope(next(self._msg_ids), correlation_id, self.name, payload)
        try:
            self._fabric.send(dest, env)
        except FabricError:
            pass

    def close(self) -> None:
        with self._lock:
            entries = list(self._pending.values())
        for entry in entries:
            if entry.timer is not None:
                entry.timer.cancel()


# -- assembly ----------------------------------------------------------------


def build_cluster(
    trees: list[RPlusTree],
    fabric,
    strategy: str = "chunk",
    timeout: float = DEFAULT_TIMEOUT,
    cache_capacity: int = DEFAULT_CACHE_CAPACITY,
    verify_cache_hits: bool = False,
    coordinator_name: str = "coordinator",
) -> tuple[Coordinator, list[StoringNode]]:
    """Wire one storing-node per tree plus a coordinator onto a fabric."""
    coordinator = Coordinator(
        fabric,
        name=coordinator_name,
        strategy=strategy,
        timeout=timeout,
        cache_capacity=cache_capacity,
        verify_cache_hits=verify_cache_hits,
    )
    nodes = []
    for node_id, tree in enumerate(trees):
        node = StoringNode(node_id, tree, fabric)
        mbr = tree.root.region if tree.root is not None else None
        coordinator.register_shard(
            node_id, node.name, tree.size, mbr, record_ids=tree._ids
        )
        node.ready()
        nodes.append(node)
    return coordinator, nodes
