"""HTTP front end for the coordinator: the client-facing query surface.

The binary fabric stays the cluster-internal transport; this service is how
operators and external clients reach a running coordinator.
"""

from __future__ import annotations

import time

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .cluster import ClusterError, Coordinator
from .model import CaseRecord, KnnQuery, Neighbor, Point, RangeQuery, Status
from .rplustree import DuplicateRecordError, RPlusTree


class KnnRequest(BaseModel):
    center: list[float] = Field(min_length=1)
    k: int = Field(ge=0)
    client_id: int = Field(default=0, ge=0, lt=2**32)


class RangeRequest(BaseModel):
    center: list[float] = Field(min_length=1)
    radius: float = Field(ge=0)
    client_id: int = Field(default=0, ge=0, lt=2**32)


class NeighborOut(BaseModel):
    record_id: int
    distance: float


class QueryResponse(BaseModel):
    query_id: int
    hits: list[NeighborOut] | list[int]
    from_cache: bool
    shard_count: int
    degraded: bool
    missing_nodes: list[int]
    elapsed_seconds: float


class InsertRequest(BaseModel):
    record_id: int = Field(ge=0, lt=2**64)
    position: list[float] = Field(min_length=1)
    status: str = "unknown"
    event_day: int | None = None
    attributes: dict[str, str] = Field(default_factory=dict)


class InsertResponse(BaseModel):
    record_id: int
    node_id: int


class ShardStatsOut(BaseModel):
    node_id: int
    size: int
    node_count: int
    leaf_count: int
    depth: int
    estimated_bytes: int


class StatsResponse(BaseModel):
    shards: list[ShardStatsOut]
    total_records: int
    total_estimated_bytes: int
    cache_entries: int
    cache_hits: int
    cache_misses: int


def _point(coords: list[float]) -> Point:
    try:
        return Point(tuple(coords))
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _response(result, elapsed: float) -> QueryResponse:
    hits: list
    if result.hits and isinstance(result.hits[0], Neighbor):
        hits = [NeighborOut(record_id=n.record_id, distance=n.distance) for n in result.hits]
    else:
        hits = [int(h) if not isinstance(h, Neighbor) else h.record_id for h in result.hits]
    return QueryResponse(
        query_id=result.query_id,
        hits=hits,
        from_cache=result.from_cache,
        shard_count=result.shard_count,
        degraded=result.degraded,
        missing_nodes=list(result.missing_nodes),
        elapsed_seconds=elapsed,
    )


def create_app(coordinator: Coordinator, trees: list[RPlusTree] | None = None) -> FastAPI:
    app = FastAPI(title="geoshard", version="0.1.0")
    app.state.coordinator = coordinator
    app.state.trees = trees or []

    @app.get("/health")
    def health():
        return {"status": "ok", "ready_shards": len(coordinator.ready_shards())}

    @app.post("/queries/knn", response_model=QueryResponse)
    def knn(req: KnnRequest):
        started = time.perf_counter()
        result = coordinator.query(req.client_id, KnnQuery(_point(req.center), req.k))
        return _response(result, time.perf_counter() - started)

    @app.post("/queries/range", response_model=QueryResponse)
    def range_(req: RangeRequest):
        started = time.perf_counter()
        try:
            query = RangeQuery(_point(req.center), req.radius)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        result = coordinator.query(req.client_id, query)
        return _response(result, time.perf_counter() - started)

    @app.post("/records", response_model=InsertResponse, status_code=201)
    def insert(req: InsertRequest):
        try:
            status = Status(req.status)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=f"unknown status {req.status!r}") from exc
        rec = CaseRecord(
            req.record_id,
            _point(req.position),
            status,
            req.event_day,
            tuple(sorted(req.attributes.items())),
        )
        try:
            node_id = coordinator.insert(rec)
        except DuplicateRecordError as exc:
            raise HTTPException(status_code=409, detail=str(exc)) from exc
        except ClusterError as exc:
            raise HTTPException(status_code=503, detail=str(exc)) from exc
        return InsertResponse(record_id=req.record_id, node_id=node_id)

    @app.get("/stats", response_model=StatsResponse)
    def stats():
        shards = []
        total_bytes = 0
        total_records = 0
        for node_id, tree in enumerate(app.state.trees):
            s = tree.stats()
            shards.append(
                ShardStatsOut(
                    node_id=node_id,
                    size=s.size,
                    node_count=s.node_count,
                    leaf_count=s.leaf_count,
                    depth=s.depth,
                    estimated_bytes=s.estimated_bytes,
                )
            )
            total_bytes += s.estimated_bytes
            total_records += s.size
        cache = coordinator.cache
        return StatsResponse(
            shards=shards,
            total_records=total_records,
            total_estimated_bytes=total_bytes,
            cache_entries=len(cache),
            cache_hits=cache.hits,
            cache_misses=cache.misses,
        )

    return app
