"""Geometry and record primitives shared by the index, cluster, and transport layers.

All types here are immutable values: safe to copy between threads and to use
as dict keys where hashable.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field


class DimensionMismatch(ValueError):
    """Operands have different coordinate dimensions."""


@dataclass(frozen=True)
class Point:
    """A d-dimensional point with finite coordinates."""

    coords: tuple[float, ...]

    def __post_init__(self) -> None:
        coords = tuple(float(c) for c in self.coords)
        if len(coords) < 1:
            raise ValueError("point needs at least one coordinate")
        for c in coords:
            if not math.isfinite(c):
                raise ValueError(f"non-finite coordinate: {c!r}")
        object.__setattr__(self, "coords", coords)

    @property
    def dim(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned bounding box. Degenerate (zero-extent) boxes are allowed."""

    min: Point
    max: Point

    def __post_init__(self) -> None:
        if self.min.dim != self.max.dim:
            raise DimensionMismatch(
                f"rect corners differ in dimension: {self.min.dim} vs {self.max.dim}"
            )
        for lo, hi in zip(self.min.coords, self.max.coords):
            if lo > hi:
                raise ValueError(f"rect min {lo} exceeds max {hi}")

    @property
    def dim(self) -> int:
        return self.min.dim

    def contains_point(self, p: Point) -> bool:
        if p.dim != self.dim:
            raise DimensionMismatch(f"point dim {p.dim} vs rect dim {self.dim}")
        return all(
            lo <= c <= hi
            for lo, c, hi in zip(self.min.coords, p.coords, self.max.coords)
        )

    def contains_rect(self, other: "Rect") -> bool:
        if other.dim != self.dim:
            raise DimensionMismatch(f"rect dims {other.dim} vs {self.dim}")
        return all(
            slo <= olo and ohi <= shi
            for slo, shi, olo, ohi in zip(
                self.min.coords, self.max.coords, other.min.coords, other.max.coords
            )
        )

    def area(self) -> float:
        out = 1.0
        for lo, hi in zip(self.min.coords, self.max.coords):
            out *= hi - lo
        return out

    @staticmethod
    def around(p: Point) -> "Rect":
        """The degenerate box covering a single point."""
        return Rect(p, p)


def distance(a: Point, b: Point) -> float:
    """Euclidean distance between two points of equal dimension."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"point dims {a.dim} vs {b.dim}")
    return math.dist(a.coords, b.coords)


def mindist(p: Point, r: Rect) -> float:
    """Minimum Euclidean distance from p to any point of r; 0 if p is inside."""
    if p.dim != r.dim:
        raise DimensionMismatch(f"point dim {p.dim} vs rect dim {r.dim}")
    total = 0.0
    for c, lo, hi in zip(p.coords, r.min.coords, r.max.coords):
        if c < lo:
            total += (lo - c) ** 2
        elif c > hi:
            total += (c - hi) ** 2
    return math.sqrt(total)


def rect_intersects(a: Rect, b: Rect) -> bool:
    """Closed-box intersection: touching faces or corners count as intersecting."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"rect dims {a.dim} vs {b.dim}")
    return all(
        alo <= bhi and blo <= ahi
        for alo, ahi, blo, bhi in zip(
            a.min.coords, a.max.coords, b.min.coords, b.max.coords
        )
    )


def rect_interiors_overlap(a: Rect, b: Rect) -> bool:
    """True iff the open interiors share positive volume (shared faces do not count)."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"rect dims {a.dim} vs {b.dim}")
    return all(
        max(alo, blo) < min(ahi, bhi)
        for alo, ahi, blo, bhi in zip(
            a.min.coords, a.max.coords, b.min.coords, b.max.coords
        )
    )


def rect_union(a: Rect, b: Rect) -> Rect:
    """Smallest box containing both arguments."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"rect dims {a.dim} vs {b.dim}")
    return Rect(
        Point(tuple(min(x, y) for x, y in zip(a.min.coords, b.min.coords))),
        Point(tuple(max(x, y) for x, y in zip(a.max.coords, b.max.coords))),
    )


class Status(enum.Enum):
    CONFIRMED = "confirmed"
    SUSPECTED = "suspected"
    RECOVERED = "recovered"
    DEAD = "dead"
    UNKNOWN = "unknown"


MAX_RECORD_ID = 2**64 - 1


@dataclass(frozen=True)
class CaseRecord:
    """One case row: identifier, position, status, and free-form attributes."""

    record_id: int
    position: Point
    status: Status = Status.UNKNOWN
    event_day: int | None = None
    attributes: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        if not 0 <= self.record_id <= MAX_RECORD_ID:
            raise ValueError(f"record_id out of 64-bit range: {self.record_id}")
        object.__setattr__(self, "attributes", tuple(tuple(a) for a in self.attributes))


@dataclass(frozen=True)
class KnnQuery:
    center: Point
    k: int

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"k must be non-negative, got {self.k}")


@dataclass(frozen=True)
class RangeQuery:
    center: Point
    radius: float

    def __post_init__(self) -> None:
        radius = float(self.radius)
        if not math.isfinite(radius) or radius < 0:
            raise ValueError(f"radius must be finite and non-negative, got {radius}")
        object.__setattr__(self, "radius", radius)


Query = KnnQuery | RangeQuery


@dataclass(frozen=True)
class Neighbor:
    record_id: int
    distance: float

    def __post_init__(self) -> None:
        if self.distance < 0:
            raise ValueError("distance must be non-negative")


@dataclass(frozen=True)
class QueryResult:
    """Ordered, ID-tagged answer to a query.

    hits is a tuple of Neighbor for KNN answers (sorted by (distance, record_id))
    or a tuple of record ids for range answers (sorted ascending).
    """

    query_id: int
    hits: tuple
    from_cache: bool = False
    shard_count: int = 0
    degraded: bool = False
    missing_nodes: tuple[int, ...] = ()
    duplicates_removed: int = 0
