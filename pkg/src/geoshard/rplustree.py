"""Per-shard spatial index: an R+-tree over point records.

Sibling node regions never have positive-volume interior overlap, so every
point record lives in exactly one leaf. Supports single insert, deterministic
bulk build, radius range query, best-first KNN, structural validation, and a
byte-stable binary snapshot format.
"""

from __future__ import annotations

import heapq
import math
import struct
from dataclasses import dataclass, field

from .model import (
    CaseRecord,
    Neighbor,
    Point,
    Rect,
    DimensionMismatch,
    distance,
    mindist,
    rect_interiors_overlap,
    rect_union,
)


class TreeError(Exception):
    """Structural or usage error in the index."""


class DuplicateRecordError(TreeError):
    """Record id already present (or repeated in a bulk-load batch)."""

    def __init__(self, record_ids):
        self.record_ids = sorted(record_ids)
        super().__init__(f"duplicate record ids: {self.record_ids}")


class SnapshotError(TreeError):
    """Snapshot bytes are corrupt or of an unsupported version."""


@dataclass(frozen=True)
class TreeConfig:
    max_entries: int = 64
    min_fill: int | None = None  # defaults to 40% of max_entries
    dimension: int = 2

    def __post_init__(self) -> None:
        m = self.max_entries
        if m < 4:
            raise ValueError(f"max_entries must be >= 4, got {m}")
        fill = self.min_fill if self.min_fill is not None else (m * 40) // 100
        if not 1 <= fill <= m // 2:
            raise ValueError(f"min_fill {fill} outside [1, {m // 2}]")
        if self.dimension < 1:
            raise ValueError("dimension must be >= 1")
        object.__setattr__(self, "min_fill", fill)


class Node:
    """Tree node; a leaf holds (record_id, Point) entries, an internal node holds children."""

    __slots__ = ("region", "entries", "children")

    def __init__(self, region: Rect, entries=None, children=None):
        self.region = region
        self.entries: list[tuple[int, Point]] | None = entries
        self.children: list[Node] | None = children

    @property
    def is_leaf(self) -> bool:
        return self.entries is not None

    def count(self) -> int:
        return len(self.entries) if self.is_leaf else len(self.children)


def _mbr_of_points(points: list[Point]) -> Rect:
    d = points[0].dim
    lo = [min(p.coords[i] for p in points) for i in range(d)]
    hi = [max(p.coords[i] for p in points) for i in range(d)]
    return Rect(Point(tuple(lo)), Point(tuple(hi)))


def _mbr_of_rects(rects: list[Rect]) -> Rect:
    out = rects[0]
    for r in rects[1:]:
        out = rect_union(out, r)
    return out


def _leaf(entries: list[tuple[int, Point]]) -> Node:
    return Node(_mbr_of_points([p for _, p in entries]), entries=entries)


def _internal(children: list["Node"]) -> Node:
    return Node(_mbr_of_rects([c.region for c in children]), children=children)


class RPlusTree:
    """One shard's index. Single writer; reads may not interleave with a mutation."""

    def __init__(self, config: TreeConfig):
        self.config = config
        self.root: Node | None = None
        self.size = 0
        self._ids: set[int] = set()

    # -- mutation ----------------------------------------------------------

    def insert(self, rec: CaseRecord) -> None:
        if rec.position.dim != self.config.dimension:
            raise DimensionMismatch(
                f"record dim {rec.position.dim} vs tree dim {self.config.dimension}"
            )
        if rec.record_id in self._ids:
            raise DuplicateRecordError([rec.record_id])
        point = rec.position
        if self.root is None:
            self.root = _leaf([(rec.record_id, point)])
        else:
            replacement = self._insert(self.root, rec.record_id, point)
            while len(replacement) > 1:
                root = _internal(replacement)
                replacement = (
                    split_node(root, self.config)
                    if root.count() > self.config.max_entries
                    else [root]
                )
            self.root = replacement[0]
        self._ids.add(rec.record_id)
        self.size += 1

    def _insert(self, node: Node, rid: int, point: Point) -> list[Node]:
        """Insert into the subtree; returns [node] or the two halves of a split."""
        if node.is_leaf:
            node.entries.append((rid, point))
            node.region = rect_union(node.region, Rect.around(point))
            if len(node.entries) > self.config.max_entries:
                return list(split_node(node, self.config))
            return [node]

        child_idx = self._choose_child(node, point)
        if child_idx is None:
            # Point sits in a hole no sibling can grow into without creating
            # positive-volume overlap: give it a fresh single-entry subtree of
            # matching height (insert-path underfill is allowed).
            node.children.append(_chain(rid, point, _height(node.children[0])))
        else:
            child = node.children[child_idx]
            child.region = rect_union(child.region, Rect.around(point))
            replacement = self._insert(child, rid, point)
            node.children[child_idx : child_idx + 1] = replacement
        node.region = rect_union(node.region, Rect.around(point))
        if len(node.children) > self.config.max_entries:
            return list(split_node(node, self.config))
        return [node]

    def _choose_child(self, node: Node, point: Point) -> int | None:
        children = node.children
        for i, child in enumerate(children):
            if child.region.contains_point(point):
                return i
        # No containing child: least area enlargement whose grown region keeps
        # sibling interiors disjoint.
        box = Rect.around(point)
        ranked = sorted(
            range(len(children)),
            key=lambda i: (
                rect_union(children[i].region, box).area() - children[i].region.area(),
                i,
            ),
        )
        for i in ranked:
            grown = rect_union(children[i].region, box)
            if not any(
                rect_interiors_overlap(grown, children[j].region)
                for j in range(len(children))
                if j != i
            ):
                return i
        return None

    # -- queries -----------------------------------------------------------

    def range_query(self, center: Point, radius: float) -> list[int]:
        if radius < 0:
            raise ValueError(f"radius must be non-negative, got {radius}")
        if center.dim != self.config.dimension:
            raise DimensionMismatch(
                f"query dim {center.dim} vs tree dim {self.config.dimension}"
            )
        out: list[int] = []
        if self.root is not None:
            self._collect_range(self.root, center, radius, out)
        out.sort()
        return out

    def _collect_range(self, node: Node, center: Point, radius: float, out: list[int]):
        if node.is_leaf:
            for rid, p in node.entries:
                if distance(p, center) <= radius:
                    out.append(rid)
        else:
            for child in node.children:
                if mindist(center, child.region) <= radius:
                    self._collect_range(child, center, radius, out)

    def knn_query(self, center: Point, k: int) -> list[Neighbor]:
        if k < 0:
            raise ValueError(f"k must be non-negative, got {k}")
        if center.dim != self.config.dimension:
            raise DimensionMismatch(
                f"query dim {center.dim} vs tree dim {self.config.dimension}"
            )
        if k == 0 or self.root is None:
            return []
        # Best-first over a frontier ordered by mindist. `worst` is a max-heap
        # (negated keys) of the best k (distance, record_id) candidates so far;
        # a node is pruned only when it cannot beat the current kth distance.
        counter = 0
        frontier = [(mindist(center, self.root.region), counter, self.root)]
        worst: list[tuple[float, int]] = []  # (-distance, -record_id)
        while frontier:
            dist, _, node = heapq.heappop(frontier)
            if len(worst) == k and dist > -worst[0][0]:
                break
            if node.is_leaf:
                for rid, p in node.entries:
                    d = distance(p, center)
                    if len(worst) < k:
                        heapq.heappush(worst, (-d, -rid))
                    elif (d, rid) < (-worst[0][0], -worst[0][1]):
                        heapq.heapreplace(worst, (-d, -rid))
            else:
                for child in node.children:
                    md = mindist(center, child.region)
                    if len(worst) < k or md <= -worst[0][0]:
                        counter += 1
                        heapq.heappush(frontier, (md, counter, child))
        hits = sorted((-d, -rid) for d, rid in worst)
        return [Neighbor(rid, d) for d, rid in hits]

    # -- inspection --------------------------------------------------------

    def validate(self) -> list[str]:
        """Check every structural invariant; returns violation descriptions."""
        problems: list[str] = []
        if self.root is None:
            if self.size != 0:
                problems.append(f"empty tree with nonzero size {self.size}")
            return problems
        leaf_depths: set[int] = set()
        seen: list[int] = []
        self._validate_node(self.root, 1, leaf_depths, seen, problems, is_root=True)
        if len(leaf_depths) > 1:
            problems.append(f"leaves at unequal depths: {sorted(leaf_depths)}")
        if len(seen) != self.size:
            problems.append(f"size {self.size} but {len(seen)} leaf entries")
        if len(set(seen)) != len(seen):
            dupes = sorted({r for r in seen if seen.count(r) > 1})
            problems.append(f"record ids stored in more than one leaf: {dupes}")
        return problems

    def _validate_node(self, node, depth, leaf_depths, seen, problems, is_root=False):
        m = self.config.max_entries
        if node.count() == 0 and not (is_root and node.is_leaf):
            problems.append(f"empty node at depth {depth}")
            return
        if node.count() > m:
            problems.append(f"node at depth {depth} holds {node.count()} > M={m}")
        if node.is_leaf:
            leaf_depths.add(depth)
            for rid, p in node.entries:
                seen.append(rid)
                if not node.region.contains_point(p):
                    problems.append(f"leaf at depth {depth} does not contain record {rid}")
        else:
            kids = node.children
            for i, child in enumerate(kids):
                if not node.region.contains_rect(child.region):
                    problems.append(f"child {i} region escapes parent at depth {depth}")
            for i in range(len(kids)):
                for j in range(i + 1, len(kids)):
                    if rect_interiors_overlap(kids[i].region, kids[j].region):
                        problems.append(
                            f"siblings {i},{j} at depth {depth} overlap with positive volume"
                        )
            for child in kids:
                self._validate_node(child, depth + 1, leaf_depths, seen, problems)

    def stats(self) -> "TreeStats":
        if self.root is None:
            return TreeStats(0, 0, 0, 0, 0)
        node_count = leaf_count = 0
        max_depth = 0
        stack = [(self.root, 1)]
        while stack:
            node, depth = stack.pop()
            node_count += 1
            max_depth = max(max_depth, depth)
            if node.is_leaf:
                leaf_count += 1
            else:
                stack.extend((c, depth + 1) for c in node.children)
        d = self.config.dimension
        est = node_count * TreeStats.node_cost(d) + self.size * TreeStats.entry_cost(d)
        return TreeStats(node_count, leaf_count, max_depth, self.size, est)

    # -- snapshots ---------------------------------------------------------

    def to_bytes(self) -> bytes:
        """Serialize to the versioned snapshot layout (see module docs)."""
        cfg = self.config
        out = [
            SNAPSHOT_MAGIC,
            struct.pack(
                ">BIIHQB",
                SNAPSHOT_VERSION,
                cfg.max_entries,
                cfg.min_fill,
                cfg.dimension,
                self.size,
                1 if self.root is not None else 0,
            ),
        ]
        if self.root is not None:
            _write_node(self.root, cfg.dimension, out)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "RPlusTree":
        r = _SnapshotReader(data)
        if r.take(4) != SNAPSHOT_MAGIC:
            raise SnapshotError("bad snapshot magic")
        version, m, fill, d, size, has_root = struct.unpack(">BIIHQB", r.take(20))
        if version != SNAPSHOT_VERSION:
            raise SnapshotError(f"unsupported snapshot version {version}")
        tree = cls(TreeConfig(max_entries=m, min_fill=fill, dimension=d))
        if has_root:
            tree.root = _read_node(r, d)
        if r.remaining():
            raise SnapshotError(f"{r.remaining()} trailing bytes after snapshot")
        if tree.root is not None:
            stack = [tree.root]
            while stack:
                node = stack.pop()
                if node.is_leaf:
                    tree._ids.update(rid for rid, _ in node.entries)
                else:
                    stack.extend(node.children)
        tree.size = len(tree._ids)
        if tree.size != size:
            raise SnapshotError(f"snapshot declares {size} records, found {tree.size}")
        return tree


@dataclass(frozen=True)
class TreeStats:
    """Structural counts plus an estimated in-memory footprint.

    estimated_bytes = node_count * node_cost(d) + size * entry_cost(d), where
    node_cost covers one region (2d float64) plus 8 bytes of bookkeeping and
    entry_cost covers one 8-byte record id plus d float64 coordinates.
    """

    node_count: int
    leaf_count: int
    depth: int
    size: int
    estimated_bytes: int

    @staticmethod
    def node_cost(dimension: int) -> int:
        return 8 + 16 * dimension

    @staticmethod
    def entry_cost(dimension: int) -> int:
        return 8 + 8 * dimension


def _height(node: Node) -> int:
    h = 1
    while not node.is_leaf:
        node = node.children[0]
        h += 1
    return h


def _chain(rid: int, point: Point, height: int) -> Node:
    node = _leaf([(rid, point)])
    for _ in range(height - 1):
        node = _internal([node])
    return node


# -- splitting ---------------------------------------------------------------


def split_node(node: Node, config: TreeConfig) -> list[Node]:
    """Split an overflowing node into nodes with disjoint-interior regions.

    The cut plane is chosen by sweeping candidate positions on every axis and
    minimizing (total region area, count imbalance). For internal nodes, any
    child straddling the plane is itself split at the plane, recursively, so
    each side's contents fit strictly within its region. Normally returns two
    nodes; pathological region layouts where every cut leaves one side over
    capacity resolve by re-splitting that side, so more than two can come back.
    """
    if node.is_leaf:
        return _split_leaf(node, config)
    return _split_internal(node, config)


def _split_leaf(node: Node, config: TreeConfig) -> list[Node]:
    entries = node.entries
    d = entries[0][1].dim
    best = None  # (area_sum, imbalance, axis, cut)
    for axis in range(d):
        values = sorted({p.coords[axis] for _, p in entries})
        for cut in values[1:]:
            left = [(r, p) for r, p in entries if p.coords[axis] < cut]
            right = [(r, p) for r, p in entries if p.coords[axis] >= cut]
            cost = (
                _mbr_of_points([p for _, p in left]).area()
                + _mbr_of_points([p for _, p in right]).area(),
                abs(len(left) - len(right)),
                axis,
                cut,
            )
            if best is None or cost < best:
                best = cost
    if best is None:
        # Every point identical: the one sanctioned degenerate case. Balanced
        # bisection; both regions are the same zero-volume point box.
        ordered = sorted(entries)
        half = len(ordered) // 2
        return [_leaf(ordered[:half]), _leaf(ordered[half:])]
    _, _, axis, cut = best
    left = [(r, p) for r, p in entries if p.coords[axis] < cut]
    right = [(r, p) for r, p in entries if p.coords[axis] >= cut]
    return [_leaf(left), _leaf(right)]


def _split_internal(node: Node, config: TreeConfig) -> list[Node]:
    kids = node.children
    m = config.max_entries
    candidates = []  # (over_capacity_flag, area_sum, imbalance, axis, cut)
    for axis in range(kids[0].region.dim):
        values = sorted(
            {c.region.min.coords[axis] for c in kids}
            | {c.region.max.coords[axis] for c in kids}
        )
        for cut in values:
            # boundary_right: zero-extent children lying exactly on the cut
            # plane go to the right side instead of the left, which is the
            # only way to peel a stack of degenerate regions off a boundary.
            for boundary_right in (False, True):
                full_left, full_right, straddle = _classify(
                    kids, axis, cut, boundary_right
                )
                if not full_left or not (full_right or straddle):
                    continue
                nl = len(full_left) + len(straddle)
                nr = len(full_right) + len(straddle)
                left_region = _clipped_union(
                    [c.region for c in full_left + straddle], axis, cut, upper=True
                )
                right_region = _clipped_union(
                    [c.region for c in full_right + straddle], axis, cut, upper=False
                )
                candidates.append(
                    (
                        0 if nl <= m and nr <= m else 1,
                        left_region.area() + right_region.area(),
                        abs(nl - nr),
                        axis,
                        cut,
                        boundary_right,
                    )
                )
    fallback: tuple[Node, Node] | None = None
    for _, _, _, axis, cut, boundary_right in sorted(candidates):
        sides = _perform_internal_split(kids, axis, cut, boundary_right)
        if sides is None:
            continue
        left, right = sides
        if left.count() <= m and right.count() <= m:
            return [left, right]
        if fallback is None:
            fallback = sides
    if fallback is not None:
        # Every workable cut overflows a side (stacked degenerate regions next
        # to a wide one). Each side holds strictly fewer entries than the
        # whole, so re-splitting terminates.
        out: list[Node] = []
        for side in fallback:
            if side.count() > m:
                out.extend(split_node(side, config))
            else:
                out.append(side)
        return out
    # No cut separates anything: every child region is one identical
    # degenerate point box (a pile of records at the same coordinate).
    # Balanced bisection is sound here: the shared region has zero volume,
    # so sibling interiors stay disjoint.
    first = kids[0].region
    if first.min == first.max and all(c.region == first for c in kids):
        half = len(kids) // 2
        return [_internal(kids[:half]), _internal(kids[half:])]
    raise TreeError(
        "internal node has no viable cut plane despite distinct child regions"
    )


def _classify(kids, axis: int, cut: float, boundary_right: bool):
    """Sort children into fully-left / fully-right / straddling the cut plane."""
    full_left: list[Node] = []
    full_right: list[Node] = []
    straddle: list[Node] = []
    for c in kids:
        lo = c.region.min.coords[axis]
        hi = c.region.max.coords[axis]
        if lo == hi == cut:
            (full_right if boundary_right else full_left).append(c)
        elif hi <= cut:
            full_left.append(c)
        elif lo >= cut:
            full_right.append(c)
        else:
            straddle.append(c)
    return full_left, full_right, straddle


def _perform_internal_split(
    kids, axis: int, cut: float, boundary_right: bool
) -> tuple[Node, Node] | None:
    """Execute one cut; None when all content lands on a single side."""
    full_left, full_right, straddle = _classify(kids, axis, cut, boundary_right)
    left_kids = list(full_left)
    right_kids = list(full_right)
    for child in straddle:
        lo, hi = _split_at_plane(child, axis, cut)
        if lo is not None:
            left_kids.append(lo)
        if hi is not None:
            right_kids.append(hi)
    if not left_kids or not right_kids:
        return None
    return _internal(left_kids), _internal(right_kids)


def _clipped_union(rects: list[Rect], axis: int, cut: float, upper: bool) -> Rect:
    """Union of rects with the given axis clamped at the cut plane."""
    u = _mbr_of_rects(rects)
    lo = list(u.min.coords)
    hi = list(u.max.coords)
    if upper:
        hi[axis] = min(hi[axis], cut)
        lo[axis] = min(lo[axis], hi[axis])
    else:
        lo[axis] = max(lo[axis], cut)
        hi[axis] = max(hi[axis], lo[axis])
    return Rect(Point(tuple(lo)), Point(tuple(hi)))


def _split_at_plane(node: Node, axis: int, cut: float):
    """Downward split propagation: partition a subtree at a hyperplane.

    Returns (left, right); either may be None when all contents fall on one
    side. Subtree heights are preserved so leaf depths stay uniform.
    """
    if node.is_leaf:
        left = [(r, p) for r, p in node.entries if p.coords[axis] < cut]
        right = [(r, p) for r, p in node.entries if p.coords[axis] >= cut]
        return (
            _leaf(left) if left else None,
            _leaf(right) if right else None,
        )
    left_kids: list[Node] = []
    right_kids: list[Node] = []
    for child in node.children:
        if child.region.max.coords[axis] <= cut:
            left_kids.append(child)
        elif child.region.min.coords[axis] >= cut:
            right_kids.append(child)
        else:
            lo, hi = _split_at_plane(child, axis, cut)
            if lo is not None:
                left_kids.append(lo)
            if hi is not None:
                right_kids.append(hi)
    return (
        _internal(left_kids) if left_kids else None,
        _internal(right_kids) if right_kids else None,
    )


# -- bulk loading ------------------------------------------------------------


def bulk_load(config: TreeConfig, records: list[CaseRecord]) -> RPlusTree:
    """Build a packed tree over the batch in one pass.

    Records are tiled by recursive axis-sorted proportional cuts (sort by the
    cycling axis, cut at proportional positions), which yields disjoint tiles
    and equal leaf depth by construction. Deterministic for a fixed input
    order and config.
    """
    tree = RPlusTree(config)
    if not records:
        return tree
    ids: set[int] = set()
    dupes: set[int] = set()
    for rec in records:
        if rec.position.dim != config.dimension:
            raise DimensionMismatch(
                f"record {rec.record_id} dim {rec.position.dim} vs tree dim {config.dimension}"
            )
        if rec.record_id in ids:
            dupes.add(rec.record_id)
        ids.add(rec.record_id)
    if dupes:
        raise DuplicateRecordError(dupes)
    entries = [(rec.record_id, rec.position) for rec in records]
    m = config.max_entries
    height = 1
    capacity = m
    while len(entries) > capacity:
        height += 1
        capacity *= m
    tree.root = _build_packed(entries, height, m, config.dimension)
    tree.size = len(entries)
    tree._ids = ids
    return tree


def _build_packed(entries, height: int, m: int, dim: int) -> Node:
    if height == 1:
        return _leaf(entries)
    subtree_cap = m ** (height - 1)
    k = -(-len(entries) // subtree_cap)
    groups = _tile(entries, k, 0, dim)
    return _internal([_build_packed(g, height - 1, m, dim) for g in groups])


def tile_entries(entries, k: int, dim: int):
    """Split (record_id, Point) entries into k groups whose bounding boxes
    have pairwise disjoint interiors."""
    return _tile(entries, k, 0, dim)


def _tile(entries, k: int, axis: int, dim: int):
    """Partition into k groups with disjoint-interior bounding boxes."""
    if k == 1:
        return [entries]
    k_left = k // 2
    ordered = sorted(entries, key=lambda e: (e[1].coords[axis], e[0]))
    n_left = -(-len(ordered) * k_left // k)
    nxt = (axis + 1) % dim
    return _tile(ordered[:n_left], k_left, nxt, dim) + _tile(
        ordered[n_left:], k - k_left, nxt, dim
    )


# -- snapshot wire format ----------------------------------------------------
#
#   magic "RPTS" | version u8 | max_entries u32 | min_fill u32 | dim u16
#   | size u64 | has_root u8 | preorder node stream
#   node: tag u8 (0 leaf, 1 internal) | region 2*dim f64 | count u32
#         | leaf: count * (record_id u64, dim f64) | internal: children preorder
#   All integers big-endian. Same tree -> same bytes.

SNAPSHOT_MAGIC = b"RPTS"
SNAPSHOT_VERSION = 1


def _write_node(node: Node, dim: int, out: list[bytes]) -> None:
    region = node.region
    out.append(
        struct.pack(
            f">B{2 * dim}dI",
            0 if node.is_leaf else 1,
            *region.min.coords,
            *region.max.coords,
            node.count(),
        )
    )
    if node.is_leaf:
        for rid, p in node.entries:
            out.append(struct.pack(f">Q{dim}d", rid, *p.coords))
    else:
        for child in node.children:
            _write_node(child, dim, out)


class _SnapshotReader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise SnapshotError("snapshot truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def remaining(self) -> int:
        return len(self.data) - self.pos


def _read_node(r: _SnapshotReader, dim: int) -> Node:
    header = struct.unpack(f">B{2 * dim}dI", r.take(1 + 16 * dim + 4))
    tag, coords, count = header[0], header[1 : 1 + 2 * dim], header[-1]
    try:
        region = Rect(Point(tuple(coords[:dim])), Point(tuple(coords[dim:])))
    except ValueError as exc:
        raise SnapshotError(f"invalid region in snapshot: {exc}") from exc
    if tag == 0:
        entries = []
        for _ in range(count):
            vals = struct.unpack(f">Q{dim}d", r.take(8 + 8 * dim))
            entries.append((vals[0], Point(tuple(vals[1:]))))
        return Node(region, entries=entries)
    if tag == 1:
        return Node(region, children=[_read_node(r, dim) for _ in range(count)])
    raise SnapshotError(f"unknown node tag {tag}")
