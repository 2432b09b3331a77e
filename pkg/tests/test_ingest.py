import pytest

from geoshard.ingest import (
    ColumnMapping,
    IngestError,
    Partition,
    build_shards,
    parse_csv,
    partition,
)
from geoshard.model import Status
from geoshard.rplustree import TreeConfig

from conftest import make_records

FIXTURE = """\
latitude,longitude,patient_id,state,confirmed_date,city
37.5,127.0,1,released,2020-01-22,Seoul
35.1,129.0,2,isolated,2020-01-23,Busan
,127.1,3,released,2020-01-24,Seoul
37.6,not-a-number,4,deceased,2020-01-25,Incheon
33.5,126.5,5,released,bad-date,Jeju
36.3,127.4,6,released,2020-02-01,Daejeon
35.8,128.6,7,isolated,2020-02-02,Daegu
37.4,126.9,8,released,2020-02-03,Suwon
36.0,129.3,9,deceased,2020-02-04,Pohang
35.2,126.8,10,released,2020-02-05,Gwangju
"""


@pytest.fixture
def fixture_csv(tmp_path):
    path = tmp_path / "cases.csv"
    path.write_text(FIXTURE)
    return path


MAPPING = ColumnMapping(
    coord_columns=("latitude", "longitude"),
    id_column="patient_id",
    status_column="state",
    status_values={"released": Status.RECOVERED, "deceased": Status.DEAD},
    date_column="confirmed_date",
    attribute_columns=("city",),
)


class TestColumnMapping:
    def test_dimension_tracks_coordinate_columns(self):
        assert MAPPING.dimension == 2
        assert ColumnMapping(coord_columns=("x", "y", "z")).dimension == 3

    def test_rejects_empty_coordinates(self):
        with pytest.raises(ValueError):
            ColumnMapping(coord_columns=())

    def test_rejects_reused_column_names(self):
        with pytest.raises(ValueError):
            ColumnMapping(coord_columns=("x", "y"), id_column="x")


class TestParseCsv:
    def test_accepts_and_rejects_expected_rows(self, fixture_csv):
        records, report = parse_csv(fixture_csv, MAPPING)
        assert report.rows_read == 10
        assert report.rows_accepted == 8
        assert report.rows_rejected == 2
        assert len(records) == 8
        assert report.rows_accepted + report.rows_rejected == report.rows_read

    def test_rejections_carry_line_numbers_and_reasons(self, fixture_csv):
        _, report = parse_csv(fixture_csv, MAPPING)
        assert [(line, reason.split()[0]) for line, reason in report.rejections] == [
            (4, "missing"),
            (5, "unparseable"),
        ]

    def test_fields_parsed(self, fixture_csv):
        records, _ = parse_csv(fixture_csv, MAPPING)
        first = records[0]
        assert first.record_id == 1
        assert first.position.coords == (37.5, 127.0)
        assert first.status is Status.RECOVERED
        # 2020-01-22 is 52 days after the 2019-12-01 epoch
        assert first.event_day == 52
        assert first.attributes == (("city", "Seoul"),)

    def test_unknown_status_degrades_to_unknown(self, fixture_csv):
        records, _ = parse_csv(fixture_csv, MAPPING)
        assert records[1].status is Status.UNKNOWN  # "isolated" not mapped

    def test_bad_date_degrades_to_absent(self, fixture_csv):
        records, _ = parse_csv(fixture_csv, MAPPING)
        by_id = {r.record_id: r for r in records}
        assert by_id[5].event_day is None

    def test_synthesized_ids_are_sequential(self, fixture_csv):
        mapping = ColumnMapping(coord_columns=("latitude", "longitude"))
        records, _ = parse_csv(fixture_csv, mapping)
        assert [r.record_id for r in records] == list(range(8))

    def test_missing_mapped_column_is_hard_error(self, fixture_csv):
        mapping = ColumnMapping(coord_columns=("latitude", "altitude"))
        with pytest.raises(IngestError, match="altitude"):
            parse_csv(fixture_csv, mapping)

    def test_header_only_file(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("latitude,longitude\n")
        records, report = parse_csv(
            path, ColumnMapping(coord_columns=("latitude", "longitude"))
        )
        assert records == [] and report.rows_read == 0

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(IngestError):
            parse_csv(tmp_path / "nope.csv", MAPPING)


class TestPartition:
    def test_chunk_sizes_round_robin_extra_rows_first(self):
        parts = partition(make_records(10), 3, "chunk")
        assert [len(p.records) for p in parts] == [4, 3, 3]

    def test_chunk_preserves_input_order(self):
        records = make_records(10)
        parts = partition(records, 3, "chunk")
        flat = [r for p in parts for r in p.records]
        assert flat == records

    def test_single_shard(self):
        records = make_records(5)
        parts = partition(records, 1, "chunk")
        assert len(parts) == 1 and list(parts[0].records) == records

    def test_more_shards_than_records(self):
        parts = partition(make_records(2), 5, "chunk")
        assert sum(len(p.records) for p in parts) == 2
        assert len(parts) == 5

    def test_spatial_conserves_records(self):
        records = make_records(137, seed=3)
        parts = partition(records, 6, "spatial")
        assert sorted(r.record_id for p in parts for r in p.records) == list(range(137))

    def test_spatial_tiles_are_disjoint(self):
        from geoshard.model import rect_interiors_overlap
        from geoshard.rplustree import _mbr_of_points

        parts = partition(make_records(200, seed=4), 8, "spatial")
        boxes = [
            _mbr_of_points([r.position for r in p.records])
            for p in parts
            if p.records
        ]
        for i in range(len(boxes)):
            for j in range(i + 1, len(boxes)):
                assert not rect_interiors_overlap(boxes[i], boxes[j])

    def test_spatial_empty_input(self):
        parts = partition([], 4, "spatial")
        assert len(parts) == 4 and all(not p.records for p in parts)

    def test_invalid_arguments(self):
        with pytest.raises(ValueError):
            partition(make_records(3), 0)
        with pytest.raises(ValueError):
            partition(make_records(3), 2, "alphabetical")


class TestBuildShards:
    def test_one_tree_per_partition_in_id_order(self):
        parts = partition(make_records(100), 4, "chunk")
        trees = build_shards(parts, TreeConfig(max_entries=8))
        assert len(trees) == 4
        assert [t.size for t in trees] == [25, 25, 25, 25]
        for tree in trees:
            assert tree.validate() == []

    def test_parallel_output_identical_to_sequential(self):
        parts = partition(make_records(500, seed=5), 7, "spatial")
        cfg = TreeConfig(max_entries=8)
        sequential = build_shards(parts, cfg, parallel=False)
        parallel = build_shards(parts, cfg, parallel=True)
        assert [t.to_bytes() for t in sequential] == [t.to_bytes() for t in parallel]

    def test_empty_partition_yields_empty_tree(self):
        trees = build_shards([Partition(0, ())], TreeConfig())
        assert trees[0].size == 0

    def test_failure_names_the_partition(self):
        bad = Partition(3, tuple(make_records(2) + make_records(2)))  # dup ids
        with pytest.raises(IngestError, match="partition 3"):
            build_shards([bad], TreeConfig())
