"""Binary wire protocol between coordinator roles and storing-nodes.

Frame layout (all integers big-endian):

    ┌──────────────┬───────────┬────────────┬──────────┬──────────────┬──────────────┬────────┬─────────┐
    │ body len u32 │ magic 4B  │ version u8 │ tag u8   │ message_id   │ correlation  │ sender │ payload │
    │              │ "SGQP"    │ 0x01       │          │ u64          │ u64          │ str    │         │
    └──────────────┴───────────┴────────────┴──────────┴──────────────┴──────────────┴────────┴─────────┘

Strings are u16 length + UTF-8 bytes. Encoding is canonical: the same
envelope always produces the same bytes. The decoder is total: any byte
input yields either an envelope or a DecodeError with a distinct code,
never a crash.

Variant tags:
    1 QuerySubmit   2 QueryAck      3 ShardQuery   4 ShardResult
    5 QueryComplete 6 InsertRecord  7 InsertAck    8 Error
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .model import (
    CaseRecord,
    KnnQuery,
    Neighbor,
    Point,
    Query,
    QueryResult,
    RangeQuery,
    Status,
)

MAGIC = b"SGQP"
VERSION = 1
MAX_PAYLOAD = 64 * 1024 * 1024

KIND_KNN = 0
KIND_RANGE = 1

_STATUS_ORDER = [
    Status.CONFIRMED,
    Status.SUSPECTED,
    Status.RECOVERED,
    Status.DEAD,
    Status.UNKNOWN,
]
_STATUS_INDEX = {s: i for i, s in enumerate(_STATUS_ORDER)}


class ProtocolError(Exception):
    pass


class EncodeError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    """Decoding failure with a machine-checkable code."""

    def __init__(self, code: str, detail: str = ""):
        self.code = code
        self.detail = detail
        super().__init__(f"{code}: {detail}" if detail else code)


# -- message variants --------------------------------------------------------


@dataclass(frozen=True)
class QuerySubmit:
    query: Query


@dataclass(frozen=True)
class QueryAck:
    query_id: int


@dataclass(frozen=True)
class ShardQuery:
    query_id: int
    query: Query


@dataclass(frozen=True)
class ShardResult:
    query_id: int
    node_id: int
    kind: int  # KIND_KNN or KIND_RANGE
    hits: tuple  # Neighbor tuple for KNN, record-id tuple for range


@dataclass(frozen=True)
class QueryComplete:
    result: QueryResult


@dataclass(frozen=True)
class InsertRecord:
    record: CaseRecord


@dataclass(frozen=True)
class InsertAck:
    node_id: int


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    text: str


Message = (
    QuerySubmit
    | QueryAck
    | ShardQuery
    | ShardResult
    | QueryComplete
    | InsertRecord
    | InsertAck
    | ErrorMessage
)

_TAGS = {
    QuerySubmit: 1,
    QueryAck: 2,
    ShardQuery: 3,
    ShardResult: 4,
    QueryComplete: 5,
    InsertRecord: 6,
    InsertAck: 7,
    ErrorMessage: 8,
}


@dataclass(frozen=True)
class Envelope:
    message_id: int
    correlation_id: int
    sender: str
    payload: Message


# -- encoding ----------------------------------------------------------------


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise EncodeError(f"string too long for wire format: {len(raw)} bytes")
    return struct.pack(">H", len(raw)) + raw


def _pack_point(p: Point) -> bytes:
    return struct.pack(f">H{p.dim}d", p.dim, *p.coords)


def _pack_query(q: Query) -> bytes:
    if isinstance(q, KnnQuery):
        return struct.pack(">B", KIND_KNN) + _pack_point(q.center) + struct.pack(">Q", q.k)
    return struct.pack(">B", KIND_RANGE) + _pack_point(q.center) + struct.pack(">d", q.radius)


def _pack_hits(kind: int, hits: tuple) -> bytes:
    parts = [struct.pack(">I", len(hits))]
    if kind == KIND_KNN:
        parts.extend(struct.pack(">Qd", n.record_id, n.distance) for n in hits)
    else:
        parts.extend(struct.pack(">Q", rid) for rid in hits)
    return b"".join(parts)


def _pack_result(r: QueryResult) -> bytes:
    # empty hit lists are ambiguous between kinds; canonicalized as KNN
    kind = KIND_RANGE if r.hits and not isinstance(r.hits[0], Neighbor) else KIND_KNN
    return (
        struct.pack(">QB", r.query_id, kind)
        + _pack_hits(kind, r.hits)
        + struct.pack(
            ">BIBI",
            1 if r.from_cache else 0,
            r.shard_count,
            1 if r.degraded else 0,
            len(r.missing_nodes),
        )
        + b"".join(struct.pack(">I", n) for n in r.missing_nodes)
        + struct.pack(">I", r.duplicates_removed)
    )


def _pack_record(rec: CaseRecord) -> bytes:
    parts = [
        struct.pack(">Q", rec.record_id),
        _pack_point(rec.position),
        struct.pack(">B", _STATUS_INDEX[rec.status]),
    ]
    if rec.event_day is None:
        parts.append(struct.pack(">B", 0))
    else:
        parts.append(struct.pack(">Bq", 1, rec.event_day))
    parts.append(struct.pack(">H", len(rec.attributes)))
    for name, value in rec.attributes:
        parts.append(_pack_str(name))
        parts.append(_pack_str(value))
    return b"".join(parts)


def _pack_payload(msg: Message) -> bytes:
    if isinstance(msg, QuerySubmit):
        return _pack_query(msg.query)
    if isinstance(msg, QueryAck):
        return struct.pack(">Q", msg.query_id)
    if isinstance(msg, ShardQuery):
        return struct.pack(">Q", msg.query_id) + _pack_query(msg.query)
    if isinstance(msg, ShardResult):
        return struct.pack(">QIB", msg.query_id, msg.node_id, msg.kind) + _pack_hits(
            msg.kind, msg.hits
        )
    if isinstance(msg, QueryComplete):
        return _pack_result(msg.result)
    if isinstance(msg, InsertRecord):
        return _pack_record(msg.record)
    if isinstance(msg, InsertAck):
        return struct.pack(">I", msg.node_id)
    if isinstance(msg, ErrorMessage):
        return struct.pack(">H", msg.code) + _pack_str(msg.text)
    raise EncodeError(f"unknown message type {type(msg).__name__}")


def encode(env: Envelope) -> bytes:
    """Envelope to one complete frame (length prefix included)."""
    body = (
        MAGIC
        + struct.pack(">BBQQ", VERSION, _TAGS[type(env.payload)], env.message_id, env.correlation_id)
        + _pack_str(env.sender)
        + _pack_payload(env.payload)
    )
    if len(body) > MAX_PAYLOAD:
        raise EncodeError(f"frame body {len(body)} exceeds {MAX_PAYLOAD} bytes")
    return struct.pack(">I", len(body)) + body


# -- decoding ----------------------------------------------------------------


class _Cursor:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DecodeError("unexpected_end", f"needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _take_str(c: _Cursor) -> str:
    (n,) = c.unpack(">H")
    try:
        return c.take(n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("bad_value", f"invalid UTF-8: {exc}") from exc


def _take_point(c: _Cursor) -> Point:
    (dim,) = c.unpack(">H")
    if dim < 1 or dim > 1024:
        raise DecodeError("bad_value", f"implausible dimension {dim}")
    coords = c.unpack(f">{dim}d")
    try:
        return Point(coords)
    except ValueError as exc:
        raise DecodeError("bad_value", str(exc)) from exc


def _take_query(c: _Cursor) -> Query:
    (kind,) = c.unpack(">B")
    center = None
    if kind == KIND_KNN:
        center = _take_point(c)
        (k,) = c.unpack(">Q")
        try:
            return KnnQuery(center, k)
        except ValueError as exc:
            raise DecodeError("bad_value", str(exc)) from exc
    if kind == KIND_RANGE:
        center = _take_point(c)
        (radius,) = c.unpack(">d")
        try:
            return RangeQuery(center, radius)
        except ValueError as exc:
            raise DecodeError("bad_value", str(exc)) from exc
    raise DecodeError("bad_value", f"unknown query kind {kind}")


def _take_hits(c: _Cursor, kind: int) -> tuple:
    (count,) = c.unpack(">I")
    if count * 8 > c.remaining():
        raise DecodeError("unexpected_end", f"hit count {count} exceeds frame")
    hits = []
    try:
        if kind == KIND_KNN:
            for _ in range(count):
                rid, dist = c.unpack(">Qd")
                hits.append(Neighbor(rid, dist))
        else:
            for _ in range(count):
                hits.append(c.unpack(">Q")[0])
    except ValueError as exc:
        raise DecodeError("bad_value", str(exc)) from exc
    return tuple(hits)


def _take_result(c: _Cursor) -> QueryResult:
    query_id, kind = c.unpack(">QB")
    if kind not in (KIND_KNN, KIND_RANGE):
        raise DecodeError("bad_value", f"unknown result kind {kind}")
    hits = _take_hits(c, kind)
    from_cache, shard_count, degraded, n_missing = c.unpack(">BIBI")
    if n_missing * 4 > c.remaining():
        raise DecodeError("unexpected_end", f"missing count {n_missing} exceeds frame")
    missing = tuple(c.unpack(">I")[0] for _ in range(n_missing))
    (dupes,) = c.unpack(">I")
    return QueryResult(
        query_id=query_id,
        hits=hits,
        from_cache=bool(from_cache),
        shard_count=shard_count,
        degraded=bool(degraded),
        missing_nodes=missing,
        duplicates_removed=dupes,
    )


def _take_record(c: _Cursor) -> CaseRecord:
    (record_id,) = c.unpack(">Q")
    position = _take_point(c)
    (status_idx,) = c.unpack(">B")
    if status_idx >= len(_STATUS_ORDER):
        raise DecodeError("bad_value", f"unknown status index {status_idx}")
    (has_day,) = c.unpack(">B")
    event_day = c.unpack(">q")[0] if has_day else None
    (n_attrs,) = c.unpack(">H")
    attrs = tuple((_take_str(c), _take_str(c)) for _ in range(n_attrs))
    return CaseRecord(record_id, position, _STATUS_ORDER[status_idx], event_day, attrs)


def _take_payload(c: _Cursor, tag: int) -> Message:
    if tag == 1:
        return QuerySubmit(_take_query(c))
    if tag == 2:
        return QueryAck(c.unpack(">Q")[0])
    if tag == 3:
        qid = c.unpack(">Q")[0]
        return ShardQuery(qid, _take_query(c))
    if tag == 4:
        qid, node_id, kind = c.unpack(">QIB")
        if kind not in (KIND_KNN, KIND_RANGE):
            raise DecodeError("bad_value", f"unknown partial kind {kind}")
        return ShardResult(qid, node_id, kind, _take_hits(c, kind))
    if tag == 5:
        return QueryComplete(_take_result(c))
    if tag == 6:
        return InsertRecord(_take_record(c))
    if tag == 7:
        return InsertAck(c.unpack(">I")[0])
    if tag == 8:
        (code,) = c.unpack(">H")
        return ErrorMessage(code, _take_str(c))
    raise DecodeError("unknown_variant", f"tag {tag}")


def decode(data: bytes) -> Envelope:
    """One complete frame (length prefix included) to an envelope."""
    c = _Cursor(bytes(data))
    (length,) = c.unpack(">I")
    if length > MAX_PAYLOAD:
        raise DecodeError("length_mismatch", f"declared body {length} exceeds cap")
    if c.remaining() < length:
        raise DecodeError("unexpected_end", f"body {c.remaining()} < declared {length}")
    if c.remaining() > length:
        raise DecodeError("length_mismatch", f"{c.remaining() - length} trailing bytes")
    if c.take(4) != MAGIC:
        raise DecodeError("bad_magic")
    version, tag, message_id, correlation_id = c.unpack(">BBQQ")
    if version != VERSION:
        raise DecodeError("bad_version", f"got {version}, support {VERSION}")
    sender = _take_str(c)
    payload = _take_payload(c, tag)
    if c.remaining():
        raise DecodeError("length_mismatch", f"{c.remaining()} unread payload bytes")
    return Envelope(message_id, correlation_id, sender, payload)


def read_frame(read_exact) -> bytes:
    """Assemble one frame from a stream via read_exact(n) -> bytes."""
    prefix = read_exact(4)
    (length,) = struct.unpack(">I", prefix)
    if length > MAX_PAYLOAD:
        raise DecodeError("length_mismatch", f"declared body {length} exceeds cap")
    return prefix + read_exact(length)
