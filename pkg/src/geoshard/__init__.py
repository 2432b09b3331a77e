"""Sharded multi-dimensional case-record store: per-shard R+-tree indexes
behind a scatter-gather query coordinator with an LRU result cache."""

from .model import (
    CaseRecord,
    KnnQuery,
    Neighbor,
    Point,
    Query,
    QueryResult,
    RangeQuery,
    Rect,
    Status,
    distance,
    mindist,
    rect_intersects,
    rect_union,
)
from .rplustree import RPlusTree, TreeConfig, bulk_load

__all__ = [
    "CaseRecord",
    "KnnQuery",
    "Neighbor",
    "Point",
    "Query",
    "QueryResult",
    "RangeQuery",
    "Rect",
    "Status",
    "distance",
    "mindist",
    "rect_intersects",
    "rect_union",
    "RPlusTree",
    "TreeConfig",
    "bulk_load",
]

__version__ = "0.1.0"
