"""Shard snapshot directories: shard-<id>.idx files plus a manifest."""

from __future__ import annotations

import os
import re
from dataclasses import dataclass

from .rplustree import RPlusTree, SnapshotError

SHARD_PATTERN = re.compile(r"^shard-(\d+)\.idx$")
MANIFEST_NAME = "manifest.txt"


class SnapshotDirError(Exception):
    pass


def shard_path(directory, shard_id: int) -> str:
    return os.path.join(directory, f"shard-{shard_id}.idx")


def save_shards(trees: list[RPlusTree], directory) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for shard_id, tree in enumerate(trees):
        path = shard_path(directory, shard_id)
        with open(path, "wb") as handle:
            handle.write(tree.to_bytes())
        paths.append(path)
    return paths


def list_shard_files(directory) -> list[tuple[int, str]]:
    """(shard_id, path) pairs sorted by shard id."""
    try:
        names = os.listdir(directory)
    except OSError as exc:
        raise SnapshotDirError(f"cannot read {directory}: {exc}") from exc
    found = []
    for name in names:
        match = SHARD_PATTERN.match(name)
        if match:
            found.append((int(match.group(1)), os.path.join(directory, name)))
    if not found:
        raise SnapshotDirError(f"no shard-<id>.idx files in {directory}")
    return sorted(found)


def load_shards(directory) -> list[RPlusTree]:
    trees = []
    for shard_id, path in list_shard_files(directory):
        with open(path, "rb") as handle:
            try:
                trees.append(RPlusTree.from_bytes(handle.read()))
            except SnapshotError as exc:
                raise SnapshotDirError(f"{path}: {exc}") from exc
    return trees


@dataclass(frozen=True)
class ShardFileReport:
    shard_id: int
    path: str
    file_bytes: int
    estimated_bytes: int
    size: int
    error: str | None = None


def inspect_shards(directory) -> list[ShardFileReport]:
    """Per-shard structural and on-disk sizes; corruption reported, not raised."""
    out = []
    for shard_id, path in list_shard_files(directory):
        file_bytes = os.path.getsize(path)
        try:
            with open(path, "rb") as handle:
                tree = RPlusTree.from_bytes(handle.read())
        except SnapshotError as exc:
            out.append(ShardFileReport(shard_id, path, file_bytes, 0, 0, error=str(exc)))
        else:
            stats = tree.stats()
            out.append(
                ShardFileReport(
                    shard_id, path, file_bytes, stats.estimated_bytes, stats.size
                )
            )
    return out
