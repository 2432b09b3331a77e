"""End-to-end acceptance battery.

Eight criteria, one test class each, covering: oracle equivalence, structural
soundness, cluster equivalence, benchmark accuracy, scaling shape, cache
behavior, transport robustness, and ingest determinism. Each test prints a
single PASS line on success so the run log reads as a checklist.
"""

import os
import random
import time

import pytest
from click.testing import CliRunner

from geoshard.bench import BenchSpec, run_bench, synthetic_records
from geoshard.cli import main as cli_main
from geoshard.cluster import QueryCache, build_cluster
from geoshard.fabric import InProcessFabric, SocketFabric
from geoshard.ingest import build_shards, partition
from geoshard.model import (
    CaseRecord,
    KnnQuery,
    Neighbor,
    Point,
    QueryResult,
    RangeQuery,
    Status,
)
from geoshard.protocol import (
    KIND_KNN,
    KIND_RANGE,
    DecodeError,
    Envelope,
    ErrorMessage,
    InsertAck,
    InsertRecord,
    QueryAck,
    QuerySubmit,
    ShardQuery,
    ShardResult,
    decode,
    encode,
)
from geoshard.rplustree import RPlusTree, TreeConfig, bulk_load
from geoshard.snapshots import list_shard_files

from conftest import knn_oracle, make_records, range_oracle


def report(criterion, detail):
    print(f"ACCEPTANCE {criterion}: PASS - {detail}")


class TestCriterion1OracleEquivalence:
    def test_knn_and_range_match_linear_scan_exactly(self):
        started = time.perf_counter()
        k_choices = [1, 10, 100, 1000]
        total_queries = 0
        for seed in range(5):
            records = make_records(10_000, seed=1000 + seed)
            tree = bulk_load(TreeConfig(max_entries=64), records)
            rng = random.Random(seed)
            for i in range(100):
                center = Point((rng.uniform(-5, 105), rng.uniform(-5, 105)))
                k = k_choices[i % len(k_choices)]
                got = [(n.record_id, n.distance) for n in tree.knn_query(center, k)]
                assert got == knn_oracle(records, center, k), (seed, i, k)
            for _ in range(100):
                center = Point((rng.uniform(-5, 105), rng.uniform(-5, 105)))
                radius = rng.uniform(0, 40)
                assert tree.range_query(center, radius) == range_oracle(
                    records, center, radius
                )
            total_queries += 200
        elapsed = time.perf_counter() - started
        assert elapsed < 120.0, f"criterion requires < 2 min, took {elapsed:.1f}s"
        report(1, f"{total_queries} queries on 5x10k records, zero mismatches, {elapsed:.1f}s")


class TestCriterion2StructuralSoundness:
    def test_validate_clean_after_bulk_and_randomized_inserts(self):
        for size, seed in ((229, 1), (1501, 2), (14_470, 3)):
            tree = bulk_load(TreeConfig(max_entries=64), make_records(size, seed=seed))
            assert tree.validate() == [], f"bulk size {size}"

        tree = RPlusTree(TreeConfig(max_entries=64))
        rng = random.Random(99)
        for rid in range(10_000):
            # mix of spread, clustered, and exactly-repeated coordinates
            roll = rng.random()
            if roll < 0.8:
                p = (rng.uniform(0, 100), rng.uniform(0, 100))
            elif roll < 0.95:
                p = (rng.gauss(50, 1), rng.gauss(50, 1))
            else:
                p = (25.0, 25.0)
            tree.insert(CaseRecord(rid, Point(p)))
        problems = tree.validate()
        assert problems == [], problems
        assert tree.size == 10_000
        report(2, "zero violations after bulk loads and 10,000 randomized inserts")


class TestCriterion3ClusterEquivalence:
    @pytest.mark.parametrize("n_shards", [1, 5, 25])
    @pytest.mark.parametrize("strategy", ["chunk", "spatial"])
    def test_distributed_equals_single_tree(self, n_shards, strategy):
        records = make_records(2_000, seed=42)
        reference = bulk_load(TreeConfig(max_entries=64), records)
        fabric = InProcessFabric()
        try:
            trees = build_shards(
                partition(records, n_shards, strategy), TreeConfig(max_entries=64)
            )
            coordinator, _ = build_cluster(
                trees, fabric, strategy=strategy, cache_capacity=0
            )
            rng = random.Random(7)
            checked = 0
            for _ in range(100):
                center = Point((rng.uniform(0, 100), rng.uniform(0, 100)))
                k = rng.choice([1, 10, 100])
                got = coordinator.query(0, KnnQuery(center, k))
                assert not got.degraded
                assert list(got.hits) == reference.knn_query(center, k)
                radius = rng.uniform(0, 30)
                rgot = coordinator.query(0, RangeQuery(center, radius))
                assert not rgot.degraded
                assert list(rgot.hits) == reference.range_query(center, radius)
                checked += 2
            assert checked >= 200
        finally:
            fabric.close()
        report(3, f"{strategy}/{n_shards} shards: 200 distributed answers equal single-tree")


class TestCriterion4BenchAccuracy:
    def test_accuracy_is_one_at_k_3000_on_10k_store(self):
        spec = BenchSpec(
            count=10_000,
            n_shards=25,
            accuracy_k=3000,
            queries_per_point=5,
            experiments=("accuracy",),
        )
        rows = run_bench(spec)
        assert rows, "accuracy experiment produced no rows"
        for row in rows:
            assert row.accuracy == 1.0, f"accuracy {row.accuracy} < 1.0"
        report(4, "Exp-5 analog accuracy = 1.0 at k=3000 on 10,000 records")


class TestCriterion5ScalingShape:
    SIZES = (229, 1_501, 14_470, 100_000)

    def _build_seconds(self, size):
        records = synthetic_records(size, seed=size)
        best = None
        reps = 3 if size <= 14_470 else 1
        for _ in range(reps):
            started = time.perf_counter()
            build_shards(
                partition(records, 25, "chunk"), TreeConfig(max_entries=64),
                parallel=True,
            )
            elapsed = time.perf_counter() - started
            best = elapsed if best is None else min(best, elapsed)
        return best

    def test_index_time_monotone_over_paper_scaled_sizes(self):
        timings = [(size, self._build_seconds(size)) for size in self.SIZES]
        for (s1, t1), (s2, t2) in zip(timings, timings[1:]):
            assert t1 <= t2, f"indexing {s1} took {t1:.4f}s but {s2} took {t2:.4f}s"
        report(5, "index time nondecreasing over " + ", ".join(
            f"{s}:{t:.3f}s" for s, t in timings
        ))

    @pytest.mark.skipif(
        not os.environ.get("GEOSHARD_FULL_SCALE"),
        reason="informational 1.4M-record threshold; set GEOSHARD_FULL_SCALE=1 to run",
    )
    def test_full_scale_ingest_under_ten_minutes(self):
        records = synthetic_records(1_400_000, seed=0)
        started = time.perf_counter()
        build_shards(
            partition(records, 25, "chunk"), TreeConfig(max_entries=64), parallel=True
        )
        elapsed = time.perf_counter() - started
        assert elapsed < 600.0, f"1.4M-record build took {elapsed:.0f}s"
        report(5, f"1.4M records indexed in {elapsed:.0f}s (< 10 min)")


class TestCriterion6CacheBehavior:
    def test_hit_miss_and_capacity_one_eviction(self):
        records = make_records(500, seed=55)
        fabric = InProcessFabric()
        try:
            trees = build_shards(partition(records, 5, "chunk"), TreeConfig(max_entries=64))
            coordinator, _ = build_cluster(trees, fabric)
            q = KnnQuery(Point((40.0, 40.0)), 8)
            fresh = coordinator.query(0, q)
            hit = coordinator.query(0, q)
            assert not fresh.from_cache and hit.from_cache
            assert hit.hits == fresh.hits

            coordinator.insert(CaseRecord(10_000, Point((40.0, 40.0))))
            after = coordinator.query(0, q)
            assert not after.from_cache, "insert must invalidate the cache"
            assert after.hits[0].record_id == 10_000, "miss must reflect the new record"
        finally:
            fabric.close()

        lru = QueryCache(capacity=1)
        q1 = KnnQuery(Point((1.0, 1.0)), 1)
        q2 = KnnQuery(Point((2.0, 2.0)), 1)
        lru.insert(q1, QueryResult(1, hits=(), shard_count=1))
        assert lru.lookup(q1) is not None
        lru.insert(q2, QueryResult(2, hits=(), shard_count=1))
        assert lru.lookup(q1) is None, "capacity-1 cache must evict the older entry"
        assert lru.lookup(q2) is not None
        report(6, "hit/miss semantics, insert invalidation, and capacity-1 LRU verified")


def _random_envelope(rng):
    def point():
        return Point(tuple(rng.uniform(-1e6, 1e6) for _ in range(rng.choice([1, 2, 3]))))

    def query():
        if rng.random() < 0.5:
            return KnnQuery(point(), rng.randrange(0, 2**32))
        return RangeQuery(point(), rng.uniform(0, 1e6))

    def record():
        return CaseRecord(
            rng.randrange(2**64),
            point(),
            rng.choice(list(Status)),
            rng.choice([None, rng.randrange(-10_000, 10_000)]),
            tuple(("k%d" % i, "v%d" % rng.randrange(100)) for i in range(rng.randrange(3))),
        )

    makers = [
        lambda: QuerySubmit(query()),
        lambda: QueryAck(rng.randrange(2**64)),
        lambda: ShardQuery(rng.randrange(2**64), query()),
        lambda: ShardResult(
            rng.randrange(2**64),
            rng.randrange(2**32),
            KIND_KNN,
            tuple(
                Neighbor(rng.randrange(2**64), rng.uniform(0, 1e6))
                for _ in range(rng.randrange(4))
            ),
        ),
        lambda: ShardResult(
            rng.randrange(2**64),
            rng.randrange(2**32),
            KIND_RANGE,
            tuple(sorted(rng.randrange(2**64) for _ in range(rng.randrange(4)))),
        ),
        lambda: InsertRecord(record()),
        lambda: InsertAck(rng.randrange(2**32)),
        lambda: ErrorMessage(rng.randrange(2**16), "e" * rng.randrange(20)),
    ]
    return Envelope(
        rng.randrange(2**64),
        rng.randrange(2**64),
        "node-%d" % rng.randrange(1000),
        rng.choice(makers)(),
    )


class TestCriterion7TransportRobustness:
    def test_ten_thousand_round_trips(self):
        rng = random.Random(2024)
        for i in range(10_000):
            env = _random_envelope(rng)
            assert decode(encode(env)) == env, f"round-trip {i} diverged"
        report(7, "10,000 randomized envelopes round-tripped identically")

    def test_ten_thousand_fuzz_inputs(self):
        rng = random.Random(4048)
        valid = [encode(_random_envelope(rng)) for _ in range(50)]
        survived = 0
        for i in range(10_000):
            if i % 2 == 0:
                blob = rng.randbytes(rng.randrange(0, 200))
            else:
                blob = bytearray(rng.choice(valid))
                for _ in range(rng.randrange(1, 6)):
                    blob[rng.randrange(len(blob))] = rng.randrange(256)
                blob = bytes(blob)
            try:
                decode(blob)
            except DecodeError:
                pass  # structured rejection is the only allowed failure
            survived += 1
        assert survived == 10_000
        report(7, "decoder survived 10,000 fuzz inputs without a crash")

    @pytest.mark.parametrize("kind", ["inproc", "socket"])
    def test_cluster_answers_identical_on_both_fabrics(self, kind):
        records = make_records(400, seed=77)
        names = ["coordinator"] + [f"shard-{i}" for i in range(5)]
        if kind == "inproc":
            fabric = InProcessFabric()
        else:
            fabric = SocketFabric({n: ("127.0.0.1", 0) for n in names})
        try:
            trees = build_shards(partition(records, 5, "chunk"), TreeConfig(max_entries=64))
            coordinator, _ = build_cluster(trees, fabric, cache_capacity=0)
            rng = random.Random(5)
            for _ in range(25):
                center = Point((rng.uniform(0, 100), rng.uniform(0, 100)))
                got = coordinator.query(0, KnnQuery(center, 13))
                assert [(h.record_id, h.distance) for h in got.hits] == knn_oracle(
                    records, center, 13
                )
                radius = rng.uniform(0, 25)
                rgot = coordinator.query(0, RangeQuery(center, radius))
                assert list(rgot.hits) == range_oracle(records, center, radius)
        finally:
            fabric.close()
        report(7, f"cluster battery identical on the {kind} fabric")

    def test_dropped_shard_degrades_within_timeout(self):
        records = make_records(300, seed=88)
        fabric = InProcessFabric()
        try:
            trees = build_shards(partition(records, 3, "chunk"), TreeConfig(max_entries=64))
            coordinator, _ = build_cluster(trees, fabric, timeout=5.0)
            fabric.set_drop("coordinator", "shard-2")
            started = time.perf_counter()
            result = coordinator.query(0, KnnQuery(Point((50.0, 50.0)), 5))
            elapsed = time.perf_counter() - started
            assert result.degraded and result.missing_nodes == (2,)
            assert elapsed <= 5.5, f"degraded answer took {elapsed:.2f}s"
        finally:
            fabric.close()
        report(7, f"dropped shard flagged degraded in {elapsed:.2f}s (<= 5s timeout)")


class TestCriterion8IngestDeterminism:
    def test_repeated_ingest_is_byte_identical(self, tmp_path):
        rng = random.Random(12)
        csv_path = tmp_path / "cases.csv"
        with open(csv_path, "w") as handle:
            handle.write("lat,lon\n")
            for _ in range(2_000):
                handle.write(f"{rng.uniform(0, 100):.8f},{rng.uniform(0, 100):.8f}\n")
        runner = CliRunner()
        blobs = []
        for label in ("first", "second"):
            out = tmp_path / label
            result = runner.invoke(
                cli_main,
                ["ingest", str(csv_path), "--coord-columns", "lat,lon",
                 "--shards", "8", "--out", str(out)],
            )
            assert result.exit_code == 0, result.output
            run = {}
            for shard_id, path in list_shard_files(out):
                with open(path, "rb") as handle:
                    run[shard_id] = handle.read()
            blobs.append(run)
        assert blobs[0] == blobs[1], "snapshot bytes differ between identical runs"
        report(8, f"two ingest runs produced byte-identical snapshots ({len(blobs[0])} shards)")
