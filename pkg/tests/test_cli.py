import csv
import os

import pytest
from click.testing import CliRunner

from geoshard.cli import main
from geoshard.snapshots import shard_path

CASES = """\
lat,lon,id
10.0,20.0,1
11.0,21.0,2
12.0,22.0,3
,23.0,4
14.0,24.0,5
"""


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def cases_csv(tmp_path):
    path = tmp_path / "cases.csv"
    path.write_text(CASES)
    return str(path)


def run_ingest(runner, cases_csv, out_dir, *extra):
    return runner.invoke(
        main,
        [
            "ingest", cases_csv,
            "--coord-columns", "lat,lon",
            "--id-column", "id",
            "--shards", "2",
            "--out", str(out_dir),
            *extra,
        ],
    )


class TestIngest:
    def test_builds_snapshots_and_manifest(self, runner, cases_csv, tmp_path):
        out = tmp_path / "store"
        result = run_ingest(runner, cases_csv, out)
        assert result.exit_code == 0, result.output
        assert "read=5 accepted=4 rejected=1" in result.output
        assert os.path.exists(shard_path(out, 0))
        assert os.path.exists(shard_path(out, 1))
        from geoshard.config import load_kv_file

        manifest = load_kv_file(out / "manifest.txt")
        assert manifest["rows_accepted"] == "4"
        assert manifest["n_shards"] == "2"
        assert manifest["strategy"] == "chunk"

    def test_reports_rejected_lines(self, runner, cases_csv, tmp_path):
        result = run_ingest(runner, cases_csv, tmp_path / "store")
        assert "rejected line 5" in result.output

    def test_deterministic_snapshot_bytes(self, runner, cases_csv, tmp_path):
        run_ingest(runner, cases_csv, tmp_path / "a")
        run_ingest(runner, cases_csv, tmp_path / "b")
        for shard_id in (0, 1):
            with open(shard_path(tmp_path / "a", shard_id), "rb") as fa:
                with open(shard_path(tmp_path / "b", shard_id), "rb") as fb:
                    assert fa.read() == fb.read()

    def test_missing_column_is_usage_error(self, runner, cases_csv, tmp_path):
        result = runner.invoke(
            main,
            ["ingest", cases_csv, "--coord-columns", "lat,altitude",
             "--out", str(tmp_path / "store")],
        )
        assert result.exit_code == 2
        assert "altitude" in result.output

    def test_mapping_file(self, runner, cases_csv, tmp_path):
        mapping = tmp_path / "mapping.conf"
        mapping.write_text("coord_columns = lat,lon\nid_column = id\n")
        result = runner.invoke(
            main,
            ["ingest", cases_csv, "--mapping", str(mapping),
             "--shards", "2", "--out", str(tmp_path / "store")],
        )
        assert result.exit_code == 0, result.output

    def test_coordinates_required(self, runner, cases_csv, tmp_path):
        result = runner.invoke(
            main, ["ingest", cases_csv, "--out", str(tmp_path / "store")]
        )
        assert result.exit_code == 2


class TestQuery:
    @pytest.fixture
    def store(self, runner, cases_csv, tmp_path):
        out = tmp_path / "store"
        assert run_ingest(runner, cases_csv, out).exit_code == 0
        return str(out)

    def test_knn_finds_nearest(self, runner, store):
        result = runner.invoke(
            main,
            ["query", "knn", "--center", "10.1,20.1", "--k", "1",
             "--snapshots", store],
        )
        assert result.exit_code == 0, result.output
        assert "hits=1" in result.output
        assert "degraded=False" in result.output

    def test_range_radius_zero(self, runner, store):
        result = runner.invoke(
            main,
            ["query", "range", "--center", "10.0,20.0", "--radius", "0",
             "--snapshots", store],
        )
        assert result.exit_code == 0, result.output
        assert "hits=1" in result.output

    def test_repeat_second_answer_from_cache(self, runner, store):
        result = runner.invoke(
            main,
            ["query", "knn", "--center", "11,21", "--k", "2",
             "--snapshots", store, "--repeat", "2"],
        )
        assert result.exit_code == 0, result.output
        flags = [line for line in result.output.splitlines() if "from_cache" in line]
        assert "from_cache=False" in flags[0]
        assert "from_cache=True" in flags[1]

    def test_knn_requires_k(self, runner, store):
        result = runner.invoke(
            main, ["query", "knn", "--center", "0,0", "--snapshots", store]
        )
        assert result.exit_code == 2

    def test_requires_snapshots_or_url(self, runner):
        result = runner.invoke(main, ["query", "knn", "--center", "0,0", "--k", "1"])
        assert result.exit_code == 2

    def test_bad_center_rejected(self, runner, store):
        result = runner.invoke(
            main,
            ["query", "knn", "--center", "zero,one", "--k", "1", "--snapshots", store],
        )
        assert result.exit_code == 2


class TestStats:
    def test_totals(self, runner, cases_csv, tmp_path):
        out = tmp_path / "store"
        run_ingest(runner, cases_csv, out)
        result = runner.invoke(main, ["stats", str(out)])
        assert result.exit_code == 0, result.output
        assert "total: records=4" in result.output

    def test_corrupt_shard_fails_with_exit_one(self, runner, cases_csv, tmp_path):
        out = tmp_path / "store"
        run_ingest(runner, cases_csv, out)
        with open(shard_path(out, 1), "wb") as handle:
            handle.write(b"junk")
        result = runner.invoke(main, ["stats", str(out)])
        assert result.exit_code == 1
        assert "shard 1: CORRUPT" in result.output

    def test_empty_directory(self, runner, tmp_path):
        result = runner.invoke(main, ["stats", str(tmp_path)])
        assert result.exit_code == 1


class TestBenchCommand:
    def test_writes_metrics_csv(self, runner, tmp_path):
        out = tmp_path / "metrics.csv"
        result = runner.invoke(
            main,
            ["bench", "--out", str(out), "--count", "200", "--shards", "2",
             "--k-list", "5", "--sizes", "50,200", "--radius-steps", "2",
             "--experiments", "index_time,knn_time,accuracy"],
        )
        assert result.exit_code == 0, result.output
        with open(out, newline="") as handle:
            rows = list(csv.reader(handle))
        assert rows[0][0] == "experiment"
        experiments = {r[0] for r in rows[1:]}
        assert experiments == {"index_time", "knn_time", "accuracy"}

    def test_invalid_spec_is_usage_error(self, runner, tmp_path):
        result = runner.invoke(
            main,
            ["bench", "--out", str(tmp_path / "m.csv"), "--experiments", "nonsense"],
        )
        assert result.exit_code == 2


class TestServe:
    def test_unknown_role_rejected(self, runner, tmp_path):
        cfg = tmp_path / "cluster.conf"
        cfg.write_text("role = overlord\n")
        result = runner.invoke(main, ["serve", "--config", str(cfg)])
        assert result.exit_code == 2

    def test_coordinator_requires_snapshot_dir(self, runner, tmp_path):
        cfg = tmp_path / "cluster.conf"
        cfg.write_text("role = coordinator\n")
        result = runner.invoke(main, ["serve", "--config", str(cfg)])
        assert result.exit_code == 2
