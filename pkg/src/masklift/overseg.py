"""Geometric over-segmentation and the mask/segment ensemble step.

Points get surface normals from local PCA, a k-NN graph weighted by normal
disagreement, and a graph-based segmentation that over-segments the scene
into small surface patches.  The ensemble step then votes each patch into
the scene's mask labels, which snaps mask boundaries to geometry and labels
leftover unlabeled points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import LabeledCloud
from .errors import ConfigError, MalformedInputError
from .merge import UnionFind, CorrespondenceSet, merge_decisions, overlap_stats


@dataclass(frozen=True)
class OversegConfig:
    knn: int = 16
    fz_k: float = 0.1
    min_segment: int = 20

    def __post_init__(self):
        if self.knn < 1:
            raise ConfigError(f"knn must be >= 1, got {self.knn}")
        if not (self.fz_k > 0 and np.isfinite(self.fz_k)):
            raise ConfigError(f"fz_k must be positive, got {self.fz_k}")
        if self.min_segment < 1:
            raise ConfigError(f"min_segment must be >= 1, got {self.min_segment}")


@dataclass(frozen=True)
class NormalCloud:
    points: np.ndarray  # (N, 3) float32
    normals: np.ndarray  # (N, 3) float64 unit vectors

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class SegGraph:
    n_nodes: int
    edges: np.ndarray  # (E, 2) int64, i < j, no duplicates, sorted by weight
    weights: np.ndarray  # (E,) float64


@dataclass(frozen=True)
class Oversegmentation:
    segment_id: np.ndarray  # (N,) int64, contiguous from 1

    def __post_init__(self):
        s = np.ascontiguousarray(self.segment_id, dtype=np.int64)
        if s.size and s.min() < 1:
            raise MalformedInputError("segment IDs must be >= 1")
        object.__setattr__(self, "segment_id", s)

    @property
    def n_segments(self) -> int:
        return int(self.segment_id.max()) if self.segment_id.size else 0


def _orient(normals: np.ndarray) -> np.ndarray:
    """Flip each unit vector so its largest-magnitude component is positive.

    Ties go to the first of the tied axes; magnitudes within a relative
    1e-9 count as tied, so eigensolver rounding noise cannot flip the sign
    of a symmetric direction like (1, -1, 0)/sqrt(2).
    """
    mags = np.abs(normals)
    near_max = mags >= mags.max(axis=1, keepdims=True) * (1.0 - 1e-9)
    dominant = np.argmax(near_max, axis=1)
    signs = np.sign(normals[np.arange(len(normals)), dominant])
    signs[signs == 0] = 1.0
    return normals * signs[:, None]


def estimate_normals(points: np.ndarray, knn: int) -> NormalCloud:
    """Per-point unit normals from PCA over the k nearest neighbors.

    The neighborhood includes the point itself.  The normal is the
    eigenvector of the neighborhood covariance with the smallest eigenvalue,
    sign-fixed by :func:`_orient`.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise MalformedInputError(f"points must be (N, 3), got {pts.shape}")
    if knn < 3:
        raise ConfigError(f"knn must be >= 3, got {knn}")
    if pts.shape[0] < knn:
        raise MalformedInputError(f"need at least {knn} points, got {pts.shape[0]}")
    tree = cKDTree(pts)
    _, idx = tree.query(pts, k=knn)
    neigh = pts[idx]  # (N, k, 3)
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / knn
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]  # eigh returns ascending eigenvalues
    norms = np.linalg.norm(normals, axis=1, keepdims=True)
    normals = normals / np.where(norms == 0, 1.0, norms)
    return NormalCloud(pts.astype(np.float32), _orient(normals))


def build_graph(cloud: NormalCloud, knn: int) -> SegGraph:
    """Undirected k-NN graph weighted by 1 - |n_i . n_j|.

    The weight ignores normal sign, so parallel surfaces connect cheaply and
    perpendicular ones cost 1.  Edges are deduplicated as (min, max) pairs
    and sorted by (weight, i, j) for deterministic downstream processing.
    """
    n = len(cloud)
    if n < knn:
        raise MalformedInputError(f"need at least {knn} points, got {n}")
    tree = cKDTree(cloud.points.astype(np.float64))
    _, idx = tree.query(cloud.points.astype(np.float64), k=knn)
    src = np.repeat(np.arange(n, dtype=np.int64), knn - 1)
    dst = idx[:, 1:].reshape(-1).astype(np.int64)  # column 0 is the point itself
    lo = np.minimum(src, dst)
    hi = np.maximum(src, dst)
    edges = np.unique(np.stack([lo, hi], axis=1), axis=0)
    edges = edges[edges[:, 0] != edges[:, 1]]
    dots = np.abs(np.sum(cloud.normals[edges[:, 0]] * cloud.normals[edges[:, 1]], axis=1))
    weights = 1.0 - np.minimum(dots, 1.0)
    order = np.lexsort((edges[:, 1], edges[:, 0], weights))
    return SegGraph(n, edges[order], weights[order])


class _NodeForest:
    """Array-backed union-find over graph nodes, tracking component sizes."""

    def __init__(self, n: int):
        self.parent = np.arange(n, dtype=np.int64)
        self.size = np.ones(n, dtype=np.int64)

    def find(self, x: int) -> int:
        parent = self.parent
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    def union(self, a: int, b: int) -> int:
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return ra
        if self.size[ra] < self.size[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        self.size[ra] += self.size[rb]
        return ra


def felzenszwalb_segment(graph: SegGraph, config: OversegConfig) -> Oversegmentation:
    """Graph segmentation by merging across edges cheaper than both sides'
    internal variation plus k/size, then absorbing undersized components.

    Segment IDs are contiguous from 1, numbered by first appearance in node
    order.
    """
    forest = _NodeForest(graph.n_nodes)
    threshold = np.full(graph.n_nodes, config.fz_k, dtype=np.float64)
    for (i, j), w in zip(graph.edges, graph.weights):
        ri, rj = forest.find(int(i)), forest.find(int(j))
        if ri == rj:
            continue
        if w <= threshold[ri] and w <= threshold[rj]:
            root = forest.union(ri, rj)
            threshold[root] = w + config.fz_k / forest.size[root]
    # Absorb components smaller than min_segment along ascending edges.
    for (i, j), _ in zip(graph.edges, graph.weights):
        ri, rj = forest.find(int(i)), forest.find(int(j))
        if ri == rj:
            continue
        if forest.size[ri] < config.min_segment or forest.size[rj] < config.min_segment:
            forest.union(ri, rj)
    roots = np.array([forest.find(i) for i in range(graph.n_nodes)], dtype=np.int64)
    _, first_pos = np.unique(roots, return_index=True)
    renumber = {int(roots[p]): rank + 1 for rank, p in enumerate(np.sort(first_pos))}
    return Oversegmentation(np.array([renumber[int(r)] for r in roots], dtype=np.int64))


def ensemble(
    scene: LabeledCloud, overseg: Oversegmentation, delta: float
) -> LabeledCloud:
    """Vote each over-segment into the scene's mask labels.

    Segments are treated as a second labeling of the same points (IDs
    shifted above the scene's) and the same both-direction overlap test used
    for cloud merging decides which segment unifies with which mask; each
    point then takes its segment's unified class.  Every output label region
    is a union of whole segments and no point stays unlabeled (a segment
    with no winning mask keeps its own shifted ID as a new instance).
    """
    if overseg.segment_id.shape[0] != len(scene):
        raise MalformedInputError(
            f"segmentation covers {overseg.segment_id.shape[0]} points, scene has {len(scene)}"
        )
    if not (0.0 < delta <= 1.0):
        raise ConfigError(f"delta must be in (0, 1], got {delta}")
    if len(scene) == 0:
        return scene
    base = int(scene.labels.max(initial=0))
    shifted = overseg.segment_id + base
    seg_cloud = LabeledCloud(scene.points, shifted)
    identity = CorrespondenceSet(
        np.stack([np.arange(len(scene), dtype=np.int64)] * 2, axis=1)
    )
    fwd = merge_decisions(overlap_stats(scene, seg_cloud, identity), delta)
    bwd = merge_decisions(overlap_stats(seg_cloud, scene, identity), delta)
    uf = UnionFind()
    for m, n in fwd:
        uf.union(m, n)
    for m, n in bwd:
        uf.union(m, n)
    return LabeledCloud(scene.points, uf.canonical(shifted))
