"""Stage one: parse case-record CSVs, partition into per-shard subsets, and
bulk-build one index per subset.

Rows with unusable coordinates are rejected and reported with line numbers,
never silently dropped; the public case datasets this targets are dirty.
"""

from __future__ import annotations

import csv
import datetime
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .model import CaseRecord, Point, Status
from .rplustree import RPlusTree, TreeConfig, bulk_load, tile_entries

SYNTHESIZE = "synthesize"

DEFAULT_EPOCH = datetime.date(2019, 12, 1)

# Lenient defaults covering the common spellings in public case datasets.
DEFAULT_STATUS_VALUES = {
    "confirmed": Status.CONFIRMED,
    "positive": Status.CONFIRMED,
    "suspected": Status.SUSPECTED,
    "suspect": Status.SUSPECTED,
    "recovered": Status.RECOVERED,
    "released": Status.RECOVERED,
    "discharged": Status.RECOVERED,
    "dead": Status.DEAD,
    "death": Status.DEAD,
    "deceased": Status.DEAD,
    "died": Status.DEAD,
}


class IngestError(Exception):
    """Unrecoverable ingestion problem (missing column, unreadable file)."""


@dataclass(frozen=True)
class ColumnMapping:
    """How a CSV schema maps onto case records; coord_columns fixes d."""

    coord_columns: tuple[str, ...]
    id_column: str = SYNTHESIZE
    status_column: str | None = None
    status_values: dict[str, Status] = field(
        default_factory=lambda: dict(DEFAULT_STATUS_VALUES)
    )
    date_column: str | None = None
    date_format: str = "%Y-%m-%d"
    epoch: datetime.date = DEFAULT_EPOCH
    attribute_columns: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "coord_columns", tuple(self.coord_columns))
        object.__setattr__(self, "attribute_columns", tuple(self.attribute_columns))
        if not self.coord_columns:
            raise ValueError("at least one coordinate column required")
        names = list(self.coord_columns) + list(self.attribute_columns)
        for col in (self.id_column, self.status_column, self.date_column):
            if col and col != SYNTHESIZE:
                names.append(col)
        if len(names) != len(set(names)):
            raise ValueError(f"mapped column names must be distinct: {names}")

    @property
    def dimension(self) -> int:
        return len(self.coord_columns)

    def mapped_columns(self) -> list[str]:
        cols = list(self.coord_columns)
        if self.id_column != SYNTHESIZE:
            cols.append(self.id_column)
        for col in (self.status_column, self.date_column):
            if col:
                cols.append(col)
        cols.extend(self.attribute_columns)
        return cols


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_accepted: int = 0
    rows_rejected: int = 0
    rejections: list[tuple[int, str]] = field(default_factory=list)
    duration: float = 0.0


@dataclass(frozen=True)
class Partition:
    partition_id: int
    records: tuple[CaseRecord, ...]


def parse_csv(path, mapping: ColumnMapping) -> tuple[list[CaseRecord], IngestReport]:
    """Read one CSV (header row required) into records plus an accounting report."""
    started = time.perf_counter()
    report = IngestReport()
    records: list[CaseRecord] = []
    try:
        handle = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read {path}: {exc}") from exc
    with handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise IngestError(f"{path}: empty file, header row required")
        missing = [c for c in mapping.mapped_columns() if c not in reader.fieldnames]
        if missing:
            raise IngestError(f"{path}: mapped column(s) not in header: {missing}")
        next_id = 0
        for row in reader:
            report.rows_read += 1
            line = reader.line_num
            rec, reason = _parse_row(row, mapping, next_id)
            if rec is None:
                report.rows_rejected += 1
                report.rejections.append((line, reason))
            else:
                records.append(rec)
                report.rows_accepted += 1
                next_id += 1
    report.duration = time.perf_counter() - started
    return records, report


def _parse_row(row, mapping: ColumnMapping, synthesized_id: int):
    coords = []
    for col in mapping.coord_columns:
        raw = (row.get(col) or "").strip()
        if not raw:
            return None, f"missing coordinate {col!r}"
        try:
            value = float(raw)
        except ValueError:
            return None, f"unparseable coordinate {col!r}: {raw!r}"
        if not math.isfinite(value):
            return None, f"non-finite coordinate {col!r}: {raw!r}"
        coords.append(value)

    if mapping.id_column == SYNTHESIZE:
        record_id = synthesized_id
    else:
        raw = (row.get(mapping.id_column) or "").strip()
        try:
            record_id = int(raw)
        except ValueError:
            return None, f"unparseable id {mapping.id_column!r}: {raw!r}"
        if record_id < 0:
            return None, f"negative id: {record_id}"

    status = Status.UNKNOWN
    if mapping.status_column:
        raw = (row.get(mapping.status_column) or "").strip().lower()
        status = mapping.status_values.get(raw, Status.UNKNOWN)

    event_day = None
    if mapping.date_column:
        raw = (row.get(mapping.date_column) or "").strip()
        if raw:
            try:
                parsed = datetime.datetime.strptime(raw, mapping.date_format).date()
                event_day = (parsed - mapping.epoch).days
            except ValueError:
                event_day = None  # dirty dates degrade to "absent", row still counts

    attributes = tuple(
        (col, (row.get(col) or "").strip()) for col in mapping.attribute_columns
    )
    return (
        CaseRecord(record_id, Point(tuple(coords)), status, event_day, attributes),
        "",
    )


def partition(
    records: list[CaseRecord], n_shards: int, strategy: str = "chunk"
) -> list[Partition]:
    """Divide records into n_shards disjoint subsets.

    "chunk" keeps input order and cuts contiguous near-equal blocks (the
    record-order subset analog); "spatial" tiles records into groups whose
    bounding boxes have disjoint interiors.
    """
    if n_shards < 1:
        raise ValueError(f"n_shards must be >= 1, got {n_shards}")
    if strategy == "chunk":
        base, extra = divmod(len(records), n_shards)
        out = []
        pos = 0
        for pid in range(n_shards):
            size = base + (1 if pid < extra else 0)
            out.append(Partition(pid, tuple(records[pos : pos + size])))
            pos += size
        return out
    if strategy == "spatial":
        if not records:
            return [Partition(pid, ()) for pid in range(n_shards)]
        dim = records[0].position.dim
        # keyed by input index, not record_id, so conservation holds even on
        # (invalid) duplicate-id input; bulk_load flags those later
        entries = [(idx, rec.position) for idx, rec in enumerate(records)]
        k = min(n_shards, len(entries))
        groups = tile_entries(entries, k, dim)
        out = [
            Partition(pid, tuple(records[idx] for idx, _ in group))
            for pid, group in enumerate(groups)
        ]
        out.extend(Partition(pid, ()) for pid in range(k, n_shards))
        return out
    raise ValueError(f"unknown partition strategy {strategy!r}")


def build_shards(
    partitions: list[Partition], config: TreeConfig, parallel: bool = False
) -> list[RPlusTree]:
    """One packed tree per partition, ordered by partition_id.

    The parallel path fans out one build per partition and joins in id order,
    so its output is identical to the sequential build.
    """
    ordered = sorted(partitions, key=lambda p: p.partition_id)

    def build(part: Partition) -> RPlusTree:
        try:
            return bulk_load(config, list(part.records))
        except Exception as exc:
            raise IngestError(f"partition {part.partition_id}: {exc}") from exc

    if not parallel or len(ordered) <= 1:
        return [build(p) for p in ordered]
    with ThreadPoolExecutor(max_workers=min(8, len(ordered))) as pool:
        return list(pool.map(build, ordered))
