"""Operator command line: ingest, query, bench, stats, serve.

Exit codes: 0 ok, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import datetime
import sys
import time

import click

from . import bench as bench_mod
from .cluster import build_cluster
from .config import ConfigError, load_kv_file, write_kv_file
from .fabric import InProcessFabric, SocketFabric
from .ingest import (
    SYNTHESIZE,
    ColumnMapping,
    IngestError,
    build_shards,
    parse_csv,
    partition,
)
from .model import KnnQuery, Neighbor, Point, RangeQuery
from .rplustree import TreeConfig
from .snapshots import SnapshotDirError, inspect_shards, load_shards, save_shards


@click.group()
def main() -> None:
    """Sharded multi-dimensional case-record store."""


def _mapping_from_sources(mapping_file, coord_columns, id_column, status_column,
                          date_column, date_format, attribute_columns) -> ColumnMapping:
    values: dict[str, str] = {}
    if mapping_file:
        values = load_kv_file(mapping_file)
    if coord_columns:
        values["coord_columns"] = coord_columns
    if id_column:
        values["id_column"] = id_column
    if status_column:
        values["status_column"] = status_column
    if date_column:
        values["date_column"] = date_column
    if date_format:
        values["date_format"] = date_format
    if attribute_columns:
        values["attribute_columns"] = attribute_columns
    if "coord_columns" not in values:
        raise click.UsageError("coordinate columns required (--coord-columns or mapping file)")
    kwargs: dict = {
        "coord_columns": tuple(
            c.strip() for c in values["coord_columns"].split(",") if c.strip()
        ),
        "id_column": values.get("id_column", SYNTHESIZE),
        "status_column": values.get("status_column") or None,
        "date_column": values.get("date_column") or None,
        "attribute_columns": tuple(
            c.strip()
            for c in values.get("attribute_columns", "").split(",")
            if c.strip()
        ),
    }
    if values.get("date_format"):
        kwargs["date_format"] = values["date_format"]
    if values.get("epoch"):
        kwargs["epoch"] = datetime.date.fromisoformat(values["epoch"])
    try:
        return ColumnMapping(**kwargs)
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc


_MAPPING_OPTIONS = [
    click.option("--mapping", "mapping_file", type=click.Path(exists=True, dir_okay=False),
                 help="Column mapping as a key = value file."),
    click.option("--coord-columns", help="Comma-separated coordinate column names."),
    click.option("--id-column", help=f"Record id column, or '{SYNTHESIZE}'."),
    click.option("--status-column", help="Case status column."),
    click.option("--date-column", help="Event date column."),
    click.option("--date-format", help="strptime format for the date column."),
    click.option("--attribute-columns", help="Comma-separated attribute columns to keep."),
]


def _with_mapping_options(fn):
    for opt in reversed(_MAPPING_OPTIONS):
        fn = opt(fn)
    return fn


@main.command()
@click.argument("input_csv", type=click.Path(exists=True, dir_okay=False))
@_with_mapping_options
@click.option("--shards", "n_shards", default=25, show_default=True, help="Shard count.")
@click.option("--strategy", type=click.Choice(["chunk", "spatial"]), default="chunk",
              show_default=True)
@click.option("--max-entries", default=64, show_default=True, help="Tree node capacity.")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False),
              help="Snapshot output directory.")
def ingest(input_csv, mapping_file, coord_columns, id_column, status_column,
           date_column, date_format, attribute_columns, n_shards, strategy,
           max_entries, out_dir) -> None:
    """Parse a case CSV, partition it, and build shard snapshots."""
    mapping = _mapping_from_sources(mapping_file, coord_columns, id_column,
                                    status_column, date_column, date_format,
                                    attribute_columns)
    started = time.perf_counter()
    try:
        records, report = parse_csv(input_csv, mapping)
        parts = partition(records, n_shards, strategy)
        trees = build_shards(
            parts, TreeConfig(max_entries=max_entries, dimension=mapping.dimension),
            parallel=True,
        )
    except IngestError as exc:
        if "not in header" in str(exc):
            raise click.UsageError(str(exc)) from exc
        raise click.ClickException(str(exc)) from exc
    build_seconds = time.perf_counter() - started
    save_shards(trees, out_dir)
    write_kv_file(
        f"{out_dir}/manifest.txt",
        {
            "dataset": input_csv,
            "rows_read": report.rows_read,
            "rows_accepted": report.rows_accepted,
            "rows_rejected": report.rows_rejected,
            "n_shards": n_shards,
            "strategy": strategy,
            "max_entries": max_entries,
            "dimension": mapping.dimension,
            "build_seconds": f"{build_seconds:.3f}",
        },
    )
    click.echo(
        f"read={report.rows_read} accepted={report.rows_accepted} "
        f"rejected={report.rows_rejected} shards={n_shards} "
        f"build_seconds={build_seconds:.3f} out={out_dir}"
    )
    for line, reason in report.rejections[:20]:
        click.echo(f"  rejected line {line}: {reason}", err=True)
    if len(report.rejections) > 20:
        click.echo(f"  ... {len(report.rejections) - 20} more rejections", err=True)


def _parse_center(center: str) -> Point:
    try:
        return Point(tuple(float(c) for c in center.split(",")))
    except ValueError as exc:
        raise click.UsageError(f"bad --center {center!r}: {exc}") from exc


@main.command()
@click.argument("kind", type=click.Choice(["knn", "range"]))
@click.option("--center", required=True, help="Comma-separated query coordinates.")
@click.option("--k", type=int, help="Neighbor count (knn).")
@click.option("--radius", type=float, help="Search radius (range).")
@click.option("--snapshots", "snapshot_dir", type=click.Path(exists=True, file_okay=False),
              help="Run against local shard snapshots.")
@click.option("--url", help="Run against a serving coordinator (thin client).")
@click.option("--strategy", type=click.Choice(["chunk", "spatial"]), default="chunk",
              show_default=True)
@click.option("--repeat", default=1, show_default=True, help="Submit the query N times.")
def query(kind, center, k, radius, snapshot_dir, url, strategy, repeat) -> None:
    """Run one KNN or range query and print the answer."""
    point = _parse_center(center)
    if kind == "knn":
        if k is None:
            raise click.UsageError("knn requires --k")
        q = KnnQuery(point, k)
    else:
        if radius is None:
            raise click.UsageError("range requires --radius")
        if radius < 0:
            raise click.UsageError("--radius must be non-negative")
        q = RangeQuery(point, radius)

    if url:
        _query_remote(url, kind, point, k, radius, repeat)
        return
    if not snapshot_dir:
        raise click.UsageError("one of --snapshots or --url is required")
    try:
        trees = load_shards(snapshot_dir)
    except SnapshotDirError as exc:
        raise click.ClickException(str(exc)) from exc
    fabric = InProcessFabric()
    try:
        coordinator, _ = build_cluster(trees, fabric, strategy=strategy)
        for _ in range(repeat):
            started = time.perf_counter()
            result = coordinator.query(0, q)
            _print_result(result, time.perf_counter() - started)
    finally:
        fabric.close()


def _query_remote(url, kind, point, k, radius, repeat) -> None:
    import httpx

    endpoint = f"{url.rstrip('/')}/queries/{kind}"
    body: dict = {"center": list(point.coords)}
    if kind == "knn":
        body["k"] = k
    else:
        body["radius"] = radius
    for _ in range(repeat):
        try:
            response = httpx.post(endpoint, json=body, timeout=30.0)
            response.raise_for_status()
        except httpx.HTTPError as exc:
            raise click.ClickException(f"{endpoint}: {exc}") from exc
        data = response.json()
        hits = data["hits"]
        for hit in hits[:20]:
            if isinstance(hit, dict):
                click.echo(f"  {hit['record_id']:>12}  d={hit['distance']:.6f}")
            else:
                click.echo(f"  {hit:>12}")
        if len(hits) > 20:
            click.echo(f"  ... {len(hits) - 20} more")
        click.echo(
            f"query_id={data['query_id']} hits={len(hits)} "
            f"elapsed={data['elapsed_seconds']:.6f} from_cache={data['from_cache']} "
            f"degraded={data['degraded']}"
        )


def _print_result(result, elapsed: float) -> None:
    if result.degraded:
        click.echo(f"warning: degraded answer, missing shards {list(result.missing_nodes)}", err=True)
    for hit in result.hits[:20]:
        if isinstance(hit, Neighbor):
            click.echo(f"  {hit.record_id:>12}  d={hit.distance:.6f}")
        else:
            click.echo(f"  {hit:>12}")
    if len(result.hits) > 20:
        click.echo(f"  ... {len(result.hits) - 20} more")
    click.echo(
        f"query_id={result.query_id} hits={len(result.hits)} elapsed={elapsed:.6f} "
        f"from_cache={result.from_cache} degraded={result.degraded}"
    )


@main.command(name="bench")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
@click.option("--count", default=10_000, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--distribution", type=click.Choice(["uniform", "clustered"]),
              default="uniform", show_default=True)
@click.option("--shards", "n_shards", default=25, show_default=True)
@click.option("--strategy", type=click.Choice(["chunk", "spatial"]), default="chunk",
              show_default=True)
@click.option("--k-list", default="1000,2000,2500,4000", show_default=True)
@click.option("--radius-min", default=0.1, show_default=True)
@click.option("--radius-max", default=50.0, show_default=True)
@click.option("--radius-steps", default=5, show_default=True)
@click.option("--sizes", default="229,1501,14470", show_default=True,
              help="Dataset sizes for the index-time and space experiments.")
@click.option("--repetitions", default=1, show_default=True)
@click.option("--experiments", default=",".join(bench_mod.ALL_EXPERIMENTS),
              show_default=True)
def bench(out_path, count, seed, distribution, n_shards, strategy, k_list,
          radius_min, radius_max, radius_steps, sizes, repetitions, experiments) -> None:
    """Run the benchmark experiments and write a metrics CSV."""
    try:
        spec = bench_mod.BenchSpec(
            count=count,
            seed=seed,
            distribution=distribution,
            n_shards=n_shards,
            strategy=strategy,
            k_list=tuple(int(v) for v in k_list.split(",") if v.strip()),
            radius_min=radius_min,
            radius_max=radius_max,
            radius_steps=radius_steps,
            sizes=tuple(int(v) for v in sizes.split(",") if v.strip()),
            repetitions=repetitions,
            experiments=tuple(e.strip() for e in experiments.split(",") if e.strip()),
        )
    except ValueError as exc:
        raise click.UsageError(str(exc)) from exc
    rows = bench_mod.run_bench(spec)
    bench_mod.write_metrics(rows, out_path)
    click.echo(f"wrote {len(rows)} metric rows to {out_path}")


@main.command()
@click.argument("snapshot_dir", type=click.Path(exists=True, file_okay=False))
def stats(snapshot_dir) -> None:
    """Report per-shard and total index sizes for a snapshot directory."""
    try:
        reports = inspect_shards(snapshot_dir)
    except SnapshotDirError as exc:
        raise click.ClickException(str(exc)) from exc
    total_file = total_est = total_records = 0
    corrupt = 0
    for rep in reports:
        if rep.error:
            corrupt += 1
            click.echo(f"shard {rep.shard_id}: CORRUPT ({rep.error})")
        else:
            click.echo(
                f"shard {rep.shard_id}: records={rep.size} "
                f"estimated_bytes={rep.estimated_bytes} file_bytes={rep.file_bytes}"
            )
            total_est += rep.estimated_bytes
            total_records += rep.size
        total_file += rep.file_bytes
    click.echo(
        f"total: records={total_records} estimated_bytes={total_est} "
        f"file_bytes={total_file}"
    )
    if corrupt:
        raise click.ClickException(f"{corrupt} corrupt snapshot(s)")


@main.command()
@click.option("--config", "config_path", required=True,
              type=click.Path(exists=True, dir_okay=False),
              help="Key = value config file.")
def serve(config_path) -> None:
    """Start a coordinator HTTP service or a storing-node fabric listener."""
    try:
        cfg = load_kv_file(config_path)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from exc
    role = cfg.get("role", "coordinator")
    if role == "coordinator":
        _serve_coordinator(cfg)
    elif role == "shard":
        _serve_shard(cfg)
    else:
        raise click.UsageError(f"unknown role {role!r} (coordinator or shard)")


def _serve_coordinator(cfg: dict[str, str]) -> None:
    import uvicorn

    from .service import create_app

    snapshot_dir = cfg.get("snapshot_dir")
    if not snapshot_dir:
        raise click.UsageError("coordinator config requires snapshot_dir")
    try:
        trees = load_shards(snapshot_dir)
    except SnapshotDirError as exc:
        raise click.ClickException(str(exc)) from exc
    fabric = InProcessFabric()
    coordinator, _ = build_cluster(
        trees,
        fabric,
        strategy=cfg.get("strategy", "chunk"),
        timeout=float(cfg.get("timeout_seconds", "5")),
        cache_capacity=int(cfg.get("cache_capacity", "1024")),
    )
    app = create_app(coordinator, trees)
    uvicorn.run(app, host=cfg.get("host", "127.0.0.1"), port=int(cfg.get("port", "8080")))


def _serve_shard(cfg: dict[str, str]) -> None:
    import threading

    from .cluster import StoringNode
    from .rplustree import RPlusTree

    shard_id = int(cfg.get("shard_id", "0"))
    snapshot = cfg.get("snapshot")
    if not snapshot:
        raise click.UsageError("shard config requires snapshot (path to shard-<id>.idx)")
    with open(snapshot, "rb") as handle:
        tree = RPlusTree.from_bytes(handle.read())
    name = cfg.get("name", f"shard-{shard_id}")
    topology = {name: (cfg.get("host", "127.0.0.1"), int(cfg.get("port", "7000")))}
    for peer in cfg.get("peers", "").split(","):
        peer = peer.strip()
        if peer:
            peer_name, host, port = peer.split(":")
            topology[peer_name] = (host, int(port))
    fabric = SocketFabric(topology)
    node = StoringNode(shard_id, tree, fabric, name=name)
    node.ready()
    click.echo(f"storing-node {name} serving {tree.size} records on {topology[name]}")
    threading.Event().wait()  # serve until interrupted


if __name__ == "__main__":
    main()
