"""Benchmark harness emitting plot-ready CSV metrics.

Five experiment shapes, all runnable on seeded synthetic data so nothing
depends on external downloads:

  index_time  — build (partition + per-shard bulk load) elapsed vs dataset size
  knn_time    — KNN elapsed vs k over one store
  range_time  — range-query elapsed over a radius ladder
  space       — estimated index bytes vs dataset size
  accuracy    — answer overlap against the linear-scan oracle (KNN, default k=3000)

Timing columns are informational and hardware-dependent; every non-timing
column is reproducible for a fixed seed.
"""

from __future__ import annotations

import csv
import math
import random
import time
from dataclasses import dataclass, field

from .cluster import Coordinator, build_cluster
from .fabric import InProcessFabric
from .ingest import build_shards, partition
from .model import CaseRecord, KnnQuery, Point, RangeQuery, distance
from .rplustree import TreeConfig

METRICS_HEADER = [
    "experiment",
    "parameter",
    "run",
    "elapsed_seconds",
    "space_bytes",
    "accuracy",
    "cache_hits",
    "cache_misses",
]

ALL_EXPERIMENTS = ("index_time", "knn_time", "range_time", "space", "accuracy")


@dataclass(frozen=True)
class BenchSpec:
    dataset: str | None = None  # CSV path; None -> synthetic
    count: int = 10_000
    seed: int = 0
    distribution: str = "uniform"  # or "clustered"
    n_shards: int = 25
    strategy: str = "chunk"
    k_list: tuple[int, ...] = (1000, 2000, 2500, 4000)
    radius_min: float = 0.1
    radius_max: float = 50.0
    radius_steps: int = 5
    sizes: tuple[int, ...] = (229, 1501, 14_470)
    accuracy_k: int = 3000
    repetitions: int = 1
    queries_per_point: int = 10
    max_entries: int = 64
    experiments: tuple[str, ...] = ALL_EXPERIMENTS

    def __post_init__(self) -> None:
        if self.count < 1 or any(s < 1 for s in self.sizes):
            raise ValueError("dataset sizes must be positive")
        if "knn_time" in self.experiments and not self.k_list:
            raise ValueError("k_list must be non-empty for KNN runs")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.radius_steps < 1 or self.radius_min < 0 or self.radius_max < self.radius_min:
            raise ValueError("invalid radius ladder")
        unknown = set(self.experiments) - set(ALL_EXPERIMENTS)
        if unknown:
            raise ValueError(f"unknown experiments: {sorted(unknown)}")


@dataclass(frozen=True)
class MetricsRow:
    experiment: str
    parameter: float
    run: int
    elapsed_seconds: float
    space_bytes: int = 0
    accuracy: float | None = None
    cache_hits: int = 0
    cache_misses: int = 0

    def __post_init__(self) -> None:
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError(f"accuracy out of [0, 1]: {self.accuracy}")


def synthetic_records(
    count: int, seed: int, distribution: str = "uniform", dimension: int = 2
) -> list[CaseRecord]:
    """Seeded synthetic case records over a 100x100 coordinate box."""
    rng = random.Random(seed)
    out = []
    if distribution == "uniform":
        for i in range(count):
            out.append(
                CaseRecord(i, Point(tuple(rng.uniform(0, 100) for _ in range(dimension))))
            )
    elif distribution == "clustered":
        centers = [
            tuple(rng.uniform(10, 90) for _ in range(dimension)) for _ in range(12)
        ]
        for i in range(count):
            cx = rng.choice(centers)
            out.append(
                CaseRecord(
                    i,
                    Point(
                        tuple(
                            min(100.0, max(0.0, rng.gauss(c, 3.0))) for c in cx
                        )
                    ),
                )
            )
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    return out


def _build_store(spec: BenchSpec, records: list[CaseRecord]):
    fabric = InProcessFabric()
    trees = build_shards(
        partition(records, spec.n_shards, spec.strategy),
        TreeConfig(max_entries=spec.max_entries),
        parallel=True,
    )
    coordinator, nodes = build_cluster(trees, fabric, strategy=spec.strategy)
    return fabric, coordinator, trees


def _query_centers(spec: BenchSpec, run: int) -> list[Point]:
    rng = random.Random(f"{spec.seed}:centers:{run}")  # str seeds hash stably
    return [
        Point((rng.uniform(0, 100), rng.uniform(0, 100)))
        for _ in range(spec.queries_per_point)
    ]


def run_bench(spec: BenchSpec, records: list[CaseRecord] | None = None) -> list[MetricsRow]:
    """Run the requested experiments; returns one row per (experiment, parameter, run)."""
    rows: list[MetricsRow] = []
    if records is None:
        records = synthetic_records(spec.count, spec.seed, spec.distribution)

    if "index_time" in spec.experiments or "space" in spec.experiments:
        for size in spec.sizes:
            sized = (
                records
                if size == len(records)
                else synthetic_records(size, spec.seed, spec.distribution)
            )
            for run in range(spec.repetitions):
                started = time.perf_counter()
                fabric, coordinator, trees = _build_store(spec, sized)
                elapsed = time.perf_counter() - started
                space = sum(t.stats().estimated_bytes for t in trees)
                fabric.close()
                if "index_time" in spec.experiments:
                    rows.append(MetricsRow("index_time", size, run, elapsed, space))
                if "space" in spec.experiments:
                    rows.append(MetricsRow("space", size, run, elapsed, space))

    needs_store = {"knn_time", "range_time", "accuracy"} & set(spec.experiments)
    if needs_store:
        fabric, coordinator, trees = _build_store(spec, records)
        by_id = {rec.record_id: rec.position for rec in records}
        try:
            if "knn_time" in spec.experiments:
                for k in spec.k_list:
                    for run in range(spec.repetitions):
                        centers = _query_centers(spec, run)
                        started = time.perf_counter()
                        for center in centers:
                            coordinator.query(0, KnnQuery(center, k))
                        elapsed = (time.perf_counter() - started) / len(centers)
                        rows.append(
                            MetricsRow(
                                "knn_time",
                                k,
                                run,
                                elapsed,
                                cache_hits=coordinator.cache.hits,
                                cache_misses=coordinator.cache.misses,
                            )
                        )
            if "range_time" in spec.experiments:
                for radius in _radius_ladder(spec):
                    for run in range(spec.repetitions):
                        centers = _query_centers(spec, run)
                        started = time.perf_counter()
                        for center in centers:
                            coordinator.query(0, RangeQuery(center, radius))
                        elapsed = (time.perf_counter() - started) / len(centers)
                        rows.append(
                            MetricsRow(
                                "range_time",
                                radius,
                                run,
                                elapsed,
                                cache_hits=coordinator.cache.hits,
                                cache_misses=coordinator.cache.misses,
                            )
                        )
            if "accuracy" in spec.experiments:
                for run in range(spec.repetitions):
                    centers = _query_centers(spec, run)
                    total = 0.0
                    started = time.perf_counter()
                    for center in centers:
                        answer = coordinator.query(0, KnnQuery(center, spec.accuracy_k))
                        oracle = knn_oracle(by_id, center, spec.accuracy_k)
                        total += overlap_fraction(
                            [n.record_id for n in answer.hits],
                            [rid for rid, _ in oracle],
                        )
                    elapsed = time.perf_counter() - started
                    rows.append(
                        MetricsRow(
                            "accuracy",
                            spec.accuracy_k,
                            run,
                            elapsed,
                            accuracy=total / len(centers),
                        )
                    )
        finally:
            fabric.close()
    return rows


def _radius_ladder(spec: BenchSpec) -> list[float]:
    if spec.radius_steps == 1:
        return [spec.radius_min]
    step = (spec.radius_max - spec.radius_min) / (spec.radius_steps - 1)
    return [spec.radius_min + i * step for i in range(spec.radius_steps)]


def knn_oracle(points_by_id: dict[int, Point], center: Point, k: int):
    """Linear scan under the (distance, record_id) tie rule."""
    ranked = sorted(
        ((distance(p, center), rid) for rid, p in points_by_id.items())
    )
    return [(rid, d) for d, rid in ranked[:k]]


def range_oracle(points_by_id: dict[int, Point], center: Point, radius: float):
    return sorted(
        rid for rid, p in points_by_id.items() if distance(p, center) <= radius
    )


def overlap_fraction(answer: list[int], oracle: list[int]) -> float:
    """|answer ∩ oracle| / |oracle|; 1.0 when the oracle set is empty."""
    if not oracle:
        return 1.0
    return len(set(answer) & set(oracle)) / len(oracle)


def write_metrics(rows: list[MetricsRow], path) -> None:
    """Schema-stable CSV: fixed header, fixed column order."""
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow(
                [
                    row.experiment,
                    row.parameter,
                    row.run,
                    f"{row.elapsed_seconds:.6f}",
                    row.space_bytes,
                    "" if row.accuracy is None else f"{row.accuracy:.6f}",
                    row.cache_hits,
                    row.cache_misses,
                ]
            )
