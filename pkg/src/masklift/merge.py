"""Merge labeled clouds by overlap voting, pairwise and over a reduction tree.

Two clouds are compared by matching each point of one to its nearest
neighbor in the other within a radius.  For every pair of mask IDs (m, n)
the cross count sigma_mn (points of m matched to points of n) is tested
against the smaller mask size:

    merge(m, n)  iff  sigma_mn > delta * min(|m|, |n|)

The test runs in both directions and every merged pair feeds a union-find;
each unified class is relabeled to its smallest member ID.  A sequence of
frame clouds is fused by merging neighbors pairwise, halving the list until
one cloud remains (an odd trailing cloud is carried up unchanged).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .cloud import LabeledCloud, concat_clouds
from .errors import ConfigError, MalformedInputError
from .gridpool import PoolConfig, grid_pool, pack_cells, voxel_cells


@dataclass(frozen=True)
class MergeConfig:
    delta: float = 0.5
    voxel_size: float = 0.05
    match_radius: float | None = None  # None: use voxel_size
    pool_after_merge: bool = True

    def __post_init__(self):
        if not (0.0 < self.delta <= 1.0):
            raise ConfigError(f"delta must be in (0, 1], got {self.delta}")
        if not (self.voxel_size > 0 and np.isfinite(self.voxel_size)):
            raise ConfigError(f"voxel size must be positive, got {self.voxel_size}")
        if self.match_radius is not None and not (
            self.match_radius > 0 and np.isfinite(self.match_radius)
        ):
            raise ConfigError(f"match radius must be positive, got {self.match_radius}")

    @property
    def radius(self) -> float:
        return self.voxel_size if self.match_radius is None else self.match_radius

    def pool_config(self) -> PoolConfig:
        return PoolConfig(self.voxel_size)


@dataclass(frozen=True)
class CorrespondenceSet:
    """Nearest-neighbor pairs (i, j): query index -> matched index."""

    pairs: np.ndarray  # (K, 2) int64, query indices unique and ascending

    def __post_init__(self):
        p = np.ascontiguousarray(self.pairs, dtype=np.int64)
        if p.ndim != 2 or p.shape[1] != 2:
            raise MalformedInputError(f"pairs must be (K, 2), got {p.shape}")
        p.flags.writeable = False
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return self.pairs.shape[0]


def find_correspondences(
    x1: LabeledCloud, x2: LabeledCloud, radius: float
) -> CorrespondenceSet:
    """Match each point of x1 to its nearest point of x2 within ``radius``.

    Distance ties go to the smaller x2 index.  Points of x1 with no neighbor
    inside the (inclusive) radius are left out.  Uses a uniform hash grid
    with cell size = radius, so only the 27 surrounding cells are scanned.
    """
    if not (radius > 0 and np.isfinite(radius)):
        raise ConfigError(f"radius must be positive, got {radius}")
    if len(x1) == 0 or len(x2) == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64))
    p1 = x1.points.astype(np.float64)
    p2 = x2.points.astype(np.float64)
    c1 = voxel_cells(p1, radius)
    c2 = voxel_cells(p2, radius)
    key2 = pack_cells(c2)
    order2 = np.argsort(key2, kind="stable")
    key2_sorted = key2[order2]

    qi_parts: list[np.ndarray] = []
    cj_parts: list[np.ndarray] = []
    offset = np.empty_like(c1)
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                offset[:, 0] = c1[:, 0] + dx
                offset[:, 1] = c1[:, 1] + dy
                offset[:, 2] = c1[:, 2] + dz
                probe = pack_cells(offset)
                lo = np.searchsorted(key2_sorted, probe, side="left")
                hi = np.searchsorted(key2_sorted, probe, side="right")
                counts = hi - lo
                total = int(counts.sum())
                if total == 0:
                    continue
                qi = np.repeat(np.arange(len(x1), dtype=np.int64), counts)
                # positions lo[q] .. hi[q] within the sorted key array
                base = np.repeat(np.cumsum(counts) - counts, counts)
                pos = np.repeat(lo, counts) + (np.arange(total, dtype=np.int64) - base)
                qi_parts.append(qi)
                cj_parts.append(order2[pos])
    if not qi_parts:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64))
    qi = np.concatenate(qi_parts)
    cj = np.concatenate(cj_parts)
    d2 = np.sum((p1[qi] - p2[cj]) ** 2, axis=1)
    keep = d2 <= radius * radius
    qi, cj, d2 = qi[keep], cj[keep], d2[keep]
    if qi.size == 0:
        return CorrespondenceSet(np.empty((0, 2), dtype=np.int64))
    sel = np.lexsort((cj, d2, qi))
    qi, cj = qi[sel], cj[sel]
    first = np.ones(qi.size, dtype=bool)
    first[1:] = qi[1:] != qi[:-1]
    return CorrespondenceSet(np.stack([qi[first], cj[first]], axis=1))


@dataclass(frozen=True)
class OverlapStats:
    """Mask size histograms and the cross-count table for one direction."""

    count1: dict[int, int]
    count2: dict[int, int]
    cross: dict[tuple[int, int], int]


def overlap_stats(
    x1: LabeledCloud, x2: LabeledCloud, corr: CorrespondenceSet
) -> OverlapStats:
    """Count mask sizes and matched label pairs (label 0 never participates)."""
    if len(corr) and (
        corr.pairs[:, 0].max() >= len(x1) or corr.pairs[:, 1].max() >= len(x2)
    ):
        raise MalformedInputError("correspondence indices out of range")

    def histogram(labels: np.ndarray) -> dict[int, int]:
        nz = labels[labels > 0]
        vals, counts = np.unique(nz, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    cross: dict[tuple[int, int], int] = {}
    if len(corr):
        m = x1.labels[corr.pairs[:, 0]]
        n = x2.labels[corr.pairs[:, 1]]
        ok = (m > 0) & (n > 0)
        if ok.any():
            pairs = np.stack([m[ok], n[ok]], axis=1)
            vals, counts = np.unique(pairs, axis=0, return_counts=True)
            cross = {(int(a), int(b)): int(c) for (a, b), c in zip(vals, counts)}
    return OverlapStats(histogram(x1.labels), histogram(x2.labels), cross)


def merge_decisions(stats: OverlapStats, delta: float) -> list[tuple[int, int]]:
    """Mask ID pairs whose cross count strictly exceeds delta * min size.

    Equality with the threshold does not merge.  Output is sorted.
    """
    out = []
    for (m, n), c in stats.cross.items():
        smaller = min(stats.count1[m], stats.count2[n])
        if c > delta * smaller:
            out.append((m, n))
    return sorted(out)


class UnionFind:
    """Union-find over mask IDs whose class representative is the smallest ID."""

    def __init__(self):
        self._parent: dict[int, int] = {}

    def find(self, x: int) -> int:
        parent = self._parent
        if x not in parent:
            return x
        root = x
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(x, x) != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        lo, hi = (ra, rb) if ra < rb else (rb, ra)
        self._parent.setdefault(lo, lo)
        self._parent[hi] = lo
        return lo

    def canonical(self, labels: np.ndarray) -> np.ndarray:
        """Vectorized find() over a label array; 0 maps to 0."""
        uniq, inverse = np.unique(labels, return_inverse=True)
        mapped = np.array([0 if u == 0 else self.find(int(u)) for u in uniq], dtype=np.int64)
        return mapped[inverse]

    def classes(self) -> dict[int, int]:
        """Mapping of every non-root ID seen so far to its representative."""
        return {x: self.find(x) for x in self._parent}


@dataclass(frozen=True)
class MergeRecord:
    left: int
    right: int
    merged_pairs: int


@dataclass(frozen=True)
class MergeTreeTrace:
    """Per-level merge records for one bottom-up fusion."""

    levels: list[list[MergeRecord]] = field(default_factory=list)

    @property
    def total_merges(self) -> int:
        return sum(len(level) for level in self.levels)

    def to_json(self) -> list[list[dict]]:
        return [
            [{"left": r.left, "right": r.right, "merged_pairs": r.merged_pairs} for r in level]
            for level in self.levels
        ]


def _check_disjoint(x1: LabeledCloud, x2: LabeledCloud) -> None:
    shared = np.intersect1d(x1.label_ids(), x2.label_ids())
    if shared.size:
        raise MalformedInputError(
            f"clouds share mask IDs {shared[:8].tolist()}; global IDs must be disjoint"
        )


def _decision_pairs(
    x1: LabeledCloud, x2: LabeledCloud, config: MergeConfig
) -> list[tuple[int, int]]:
    """Unordered mask-ID pairs to unify, from both matching directions."""
    radius = config.radius
    fwd = merge_decisions(overlap_stats(x1, x2, find_correspondences(x1, x2, radius)), config.delta)
    bwd = merge_decisions(overlap_stats(x2, x1, find_correspondences(x2, x1, radius)), config.delta)
    pairs = {(min(m, n), max(m, n)) for m, n in fwd}
    pairs.update((min(m, n), max(m, n)) for m, n in bwd)
    return sorted(pairs)


def _apply_pairs(
    x1: LabeledCloud,
    x2: LabeledCloud,
    pairs: list[tuple[int, int]],
    config: MergeConfig,
) -> LabeledCloud:
    uf = UnionFind()
    for a, b in pairs:
        uf.union(a, b)
    merged = concat_clouds(x1, x2)
    out = LabeledCloud(merged.points, uf.canonical(merged.labels))
    if config.pool_after_merge:
        out = grid_pool(out, config.pool_config())
    return out


def bidirectional_merge(
    x1: LabeledCloud, x2: LabeledCloud, config: MergeConfig
) -> LabeledCloud:
    """Merge two clouds with disjoint nonzero label sets into one."""
    _check_disjoint(x1, x2)
    return _apply_pairs(x1, x2, _decision_pairs(x1, x2, config), config)


def bottom_up_merge(
    clouds: list[LabeledCloud],
    config: MergeConfig,
    threads: int = 1,
) -> tuple[LabeledCloud, MergeTreeTrace]:
    """Fuse an ordered list of clouds by repeated pairwise merging.

    Level t merges clouds (2i, 2i+1); an odd trailing cloud is carried to the
    next level unchanged.  K clouds take ceil(log2(K)) levels and exactly
    K - 1 pair merges.  ``threads`` only parallelizes independent pair
    merges within a level; results are identical for any thread count.
    """
    if not clouds:
        raise MalformedInputError("bottom_up_merge needs at least one cloud")
    if threads < 1:
        raise ConfigError(f"thread count must be >= 1, got {threads}")
    for i in range(len(clouds)):
        for j in range(i + 1, len(clouds)):
            _check_disjoint(clouds[i], clouds[j])

    level = list(clouds)
    trace_levels: list[list[MergeRecord]] = []
    while len(level) > 1:
        jobs = list(range(len(level) // 2))

        def merge_pair(i: int) -> tuple[LabeledCloud, int]:
            a, b = level[2 * i], level[2 * i + 1]
            pairs = _decision_pairs(a, b, config)
            return _apply_pairs(a, b, pairs, config), len(pairs)

        if threads > 1 and len(jobs) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(merge_pair, jobs))
        else:
            results = [merge_pair(i) for i in jobs]

        records = [
            MergeRecord(2 * i, 2 * i + 1, n_pairs) for i, (_, n_pairs) in zip(jobs, results)
        ]
        next_level = [cloud for cloud, _ in results]
        if len(level) % 2:
            next_level.append(level[-1])
        trace_levels.append(records)
        level = next_level
    return level[0], MergeTreeTrace(trace_levels)


def pair_schedule(count: int) -> list[list[tuple[int, int]]]:
    """The (left, right) index pairs merged at each level for ``count`` inputs.

    Shared with the evaluation harness so reference reductions follow the
    exact same tree.
    """
    levels = []
    n = count
    while n > 1:
        levels.append([(2 * i, 2 * i + 1) for i in range(n // 2)])
        n = n // 2 + (n % 2)
    return levels
