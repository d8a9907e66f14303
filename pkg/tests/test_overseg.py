"""Over-segmentation tests: normals, graph building, segmentation, ensemble."""

import numpy as np
import pytest

from masklift import (
    LabeledCloud,
    MalformedInputError,
    Oversegmentation,
    OversegConfig,
    SegGraph,
    build_graph,
    ensemble,
    estimate_normals,
    felzenszwalb_segment,
)

from conftest import make_cloud, random_rotation


# ---------------------------------------------------------------------------
# Normals
# ---------------------------------------------------------------------------


class TestEstimateNormals:
    def test_plane_z0(self, rng):
        pts = np.zeros((100, 3))
        pts[:, :2] = rng.uniform(0, 1, size=(100, 2))
        nc = estimate_normals(pts, 10)
        np.testing.assert_allclose(nc.normals, np.tile([0.0, 0.0, 1.0], (100, 1)), atol=1e-6)

    def test_diagonal_plane_sign_rule(self, rng):
        # Plane x = y: normal direction +-(1, -1, 0)/sqrt(2); the largest
        # magnitude component must come out positive, so (1/sqrt2, -1/sqrt2, 0).
        t = rng.uniform(0, 1, size=(80, 2))
        pts = np.stack([t[:, 0], t[:, 0], t[:, 1]], axis=1)
        nc = estimate_normals(pts, 10)
        expected = np.array([1.0, -1.0, 0.0]) / np.sqrt(2.0)
        np.testing.assert_allclose(nc.normals, np.tile(expected, (80, 1)), atol=1e-6)

    def test_sphere_normals_near_radial(self):
        # evenly distributed sphere points (golden-angle spiral)
        n = 2000
        k = np.arange(n) + 0.5
        phi = np.arccos(1.0 - 2.0 * k / n)
        theta = np.pi * (1.0 + np.sqrt(5.0)) * k
        direction = np.stack(
            [np.sin(phi) * np.cos(theta), np.sin(phi) * np.sin(theta), np.cos(phi)], axis=1
        )
        nc = estimate_normals(direction, 12)
        # normals are sign-normalized, so compare up to sign
        cos = np.abs(np.sum(nc.normals * direction, axis=1))
        angles = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
        assert angles.max() < 5.0

    def test_unit_length(self, rng):
        pts = rng.uniform(0, 1, size=(50, 3))
        nc = estimate_normals(pts, 8)
        np.testing.assert_allclose(np.linalg.norm(nc.normals, axis=1), 1.0, atol=1e-6)

    def test_insufficient_points_rejected(self):
        with pytest.raises(MalformedInputError):
            estimate_normals(np.zeros((4, 3)), 5)

    def test_rotated_plane_follows_rotation(self, rng):
        base = np.zeros((200, 3))
        base[:, :2] = rng.uniform(-1, 1, size=(200, 2))
        rot = random_rotation(rng)
        nc = estimate_normals(base @ rot.T, 12)
        expected = rot @ np.array([0.0, 0.0, 1.0])
        dots = np.abs(nc.normals @ expected)
        np.testing.assert_allclose(dots, 1.0, atol=1e-6)


# ---------------------------------------------------------------------------
# Graph construction
# ---------------------------------------------------------------------------


class TestBuildGraph:
    def test_weights_match_brute_force(self, rng):
        pts = rng.uniform(0, 1, size=(60, 3))
        nc = estimate_normals(pts, 8)
        graph = build_graph(nc, 8)
        for (i, j), w in zip(graph.edges, graph.weights):
            expected = 1.0 - abs(float(nc.normals[i] @ nc.normals[j]))
            assert abs(w - expected) < 1e-9
            assert 0.0 <= w <= 1.0
            assert i < j

    def test_no_duplicate_undirected_edges(self, rng):
        pts = rng.uniform(0, 1, size=(80, 3))
        nc = estimate_normals(pts, 10)
        graph = build_graph(nc, 10)
        seen = {tuple(e) for e in graph.edges.tolist()}
        assert len(seen) == len(graph.edges)

    def test_edges_sorted_by_weight(self, rng):
        pts = rng.uniform(0, 1, size=(70, 3))
        nc = estimate_normals(pts, 9)
        graph = build_graph(nc, 9)
        assert np.all(np.diff(graph.weights) >= 0)

    def test_coplanar_neighbors_weight_zero(self):
        pts = np.zeros((20, 3))
        pts[:, 0] = np.arange(20) * 0.1
        pts[:10, 1] = 1.0
        nc = estimate_normals(pts, 5)
        graph = build_graph(nc, 5)
        np.testing.assert_allclose(graph.weights, 0.0, atol=1e-9)


# ---------------------------------------------------------------------------
# Graph segmentation
# ---------------------------------------------------------------------------


def reference_segmentation(n_nodes, edge_list, fz_k, min_size):
    """Set-based reimplementation of the merge predicate, edge by edge.

    Components are plain frozensets; Int(C) is recomputed as the max weight
    among the edges that merged C. Undersized components are absorbed along
    ascending edges afterwards.
    """
    order = sorted(edge_list, key=lambda e: (e[2], e[0], e[1]))
    comp_of = {i: frozenset([i]) for i in range(n_nodes)}
    internal = {frozenset([i]): 0.0 for i in range(n_nodes)}

    def merge(ca, cb, w):
        union = ca | cb
        internal[union] = max(internal[ca], internal[cb], w)
        for node in union:
            comp_of[node] = union

    for i, j, w in order:
        ca, cb = comp_of[i], comp_of[j]
        if ca is cb or ca == cb:
            continue
        if w <= min(internal[ca] + fz_k / len(ca), internal[cb] + fz_k / len(cb)):
            merge(ca, cb, w)
    for i, j, w in order:
        ca, cb = comp_of[i], comp_of[j]
        if ca == cb:
            continue
        if len(ca) < min_size or len(cb) < min_size:
            merge(ca, cb, w)
    labels = {}
    out = []
    for i in range(n_nodes):
        key = comp_of[i]
        if key not in labels:
            labels[key] = len(labels) + 1
        out.append(labels[key])
    return out


def _graph_from_list(n, edge_list):
    if not edge_list:
        return SegGraph(n, np.empty((0, 2), dtype=np.int64), np.empty(0))
    arr = np.array([(i, j) for i, j, _ in edge_list], dtype=np.int64)
    w = np.array([w for _, _, w in edge_list])
    order = np.lexsort((arr[:, 1], arr[:, 0], w))
    return SegGraph(n, arr[order], w[order])


class TestFelzenszwalbSegment:
    def test_zero_weight_graph_single_segment(self):
        edges = [(i, i + 1, 0.0) for i in range(7)]
        seg = felzenszwalb_segment(_graph_from_list(8, edges), OversegConfig(min_segment=1))
        assert seg.segment_id.tolist() == [1] * 8

    def test_disconnected_components_stay_apart(self):
        edges = [(0, 1, 0.0), (2, 3, 0.0)]
        seg = felzenszwalb_segment(_graph_from_list(4, edges), OversegConfig(min_segment=1))
        assert seg.segment_id.tolist() == [1, 1, 2, 2]

    def test_expensive_edge_splits(self):
        edges = [(0, 1, 0.0), (1, 2, 0.9), (2, 3, 0.0)]
        seg = felzenszwalb_segment(_graph_from_list(4, edges), OversegConfig(fz_k=0.1, min_segment=1))
        assert seg.segment_id.tolist() == [1, 1, 2, 2]

    def test_min_segment_absorbs_small_components(self):
        # the expensive edge normally splits, but a min_segment of 2 forces
        # the singleton back into its cheapest neighbor
        edges = [(0, 1, 0.0), (1, 2, 0.9)]
        seg = felzenszwalb_segment(_graph_from_list(3, edges), OversegConfig(fz_k=0.1, min_segment=2))
        assert seg.segment_id.tolist() == [1, 1, 1]

    def test_ids_contiguous_from_one(self, rng):
        for _ in range(20):
            n = int(rng.integers(2, 12))
            edges = []
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.4:
                        edges.append((i, j, float(rng.uniform(0, 1))))
            seg = felzenszwalb_segment(
                _graph_from_list(n, edges), OversegConfig(fz_k=0.2, min_segment=1)
            )
            ids = np.unique(seg.segment_id)
            assert ids.tolist() == list(range(1, len(ids) + 1))

    def test_matches_reference_on_small_graphs(self, rng):
        for trial in range(300):
            n = int(rng.integers(2, 13))
            edges = []
            for i in range(n):
                for j in range(i + 1, n):
                    if rng.random() < 0.5:
                        edges.append((i, j, float(rng.choice([0.0, 0.1, 0.25, 0.5, 1.0]))))
            fz_k = float(rng.choice([0.05, 0.1, 0.3]))
            min_size = int(rng.integers(1, 4))
            cfg = OversegConfig(fz_k=fz_k, min_segment=min_size)
            got = felzenszwalb_segment(_graph_from_list(n, edges), cfg).segment_id.tolist()
            want = reference_segmentation(n, edges, fz_k, min_size)
            assert got == want, f"trial {trial}: {edges}"


def dihedral_cloud(per_plane=900, rows=30):
    """Two orthogonal planes meeting along the y axis.

    Returns (points, plane_membership).  Plane A lies in z=0 (x > 0),
    plane B in x=0 (z > 0).
    """
    cols = per_plane // rows
    spacing = 1.0 / cols
    xs = (np.arange(cols) + 1.0) * spacing
    ys = np.arange(rows) * spacing
    gx, gy = np.meshgrid(xs, ys)
    plane_a = np.stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)], axis=1)
    plane_b = np.stack([np.zeros(gx.size), gy.ravel(), gx.ravel()], axis=1)
    points = np.concatenate([plane_a, plane_b])
    membership = np.concatenate([np.zeros(len(plane_a), int), np.ones(len(plane_b), int)])
    return points, membership


def segmentation_purity(segment_id, membership):
    total = 0
    for seg in np.unique(segment_id):
        members = membership[segment_id == seg]
        total += max(np.sum(members == 0), np.sum(members == 1))
    return total / len(membership)


class TestDihedralScene:
    def test_two_planes_separate(self):
        points, membership = dihedral_cloud()
        nc = estimate_normals(points, 16)
        graph = build_graph(nc, 16)
        seg = felzenszwalb_segment(graph, OversegConfig())
        assert seg.n_segments >= 2
        assert segmentation_purity(seg.segment_id, membership) >= 0.99


# ---------------------------------------------------------------------------
# Ensemble
# ---------------------------------------------------------------------------


def _scene(labels):
    pts = np.zeros((len(labels), 3))
    pts[:, 0] = np.arange(len(labels))
    return make_cloud(pts, labels)


class TestEnsemble:
    def test_identical_partitions_unchanged(self):
        scene = _scene([1, 1, 2, 2, 2])
        seg = Oversegmentation(np.array([1, 1, 2, 2, 2]))
        out = ensemble(scene, seg, 0.5)
        assert out.labels.tolist() == [1, 1, 2, 2, 2]

    def test_unlabeled_points_adopt_covering_mask(self):
        # segment 1 is 60% covered by mask 7; its unlabeled points join 7
        scene = _scene([7, 7, 7, 0, 0, 7, 7])
        seg = Oversegmentation(np.array([1, 1, 1, 1, 1, 2, 2]))
        out = ensemble(scene, seg, 0.5)
        assert out.labels.tolist() == [7] * 7

    def test_split_segment_does_not_bridge_masks(self):
        # segment 3 covers 40% of each of two larger masks: no unification,
        # its points become a fresh instance
        labels = [1] * 4 + [2] * 4 + [1, 2, 0, 0, 0]
        scene = _scene(labels)
        seg_ids = [1] * 4 + [2] * 4 + [3] * 5
        seg = Oversegmentation(np.array(seg_ids))
        out = ensemble(scene, seg, 0.5)
        got = out.labels.tolist()
        assert got[:4] == [1] * 4
        assert got[4:8] == [2] * 4
        tail = set(got[8:])
        assert len(tail) == 1
        assert tail.isdisjoint({1, 2})

    def test_small_mask_inside_large_segment_unifies(self):
        # mask 9 has 2 points, all inside segment 1 (10 points): cross = 2 >
        # 0.5 * min(2, 10), so the segment and mask unify
        labels = [9, 9] + [0] * 8
        scene = _scene(labels)
        seg = Oversegmentation(np.ones(10, dtype=np.int64))
        out = ensemble(scene, seg, 0.5)
        assert out.labels.tolist() == [9] * 10

    def test_regions_are_unions_of_segments_and_cover(self, rng):
        for _ in range(30):
            n = int(rng.integers(10, 120))
            labels = rng.integers(0, 6, size=n)
            seg_raw = rng.integers(0, max(2, n // 8), size=n)
            _, seg_ids = np.unique(seg_raw, return_inverse=True)
            scene = _scene(labels)
            seg = Oversegmentation(seg_ids + 1)
            out = ensemble(scene, seg, 0.5)
            assert np.all(out.labels > 0)
            # one final label per segment
            for s in np.unique(seg.segment_id):
                finals = np.unique(out.labels[seg.segment_id == s])
                assert len(finals) == 1

    def test_length_mismatch_rejected(self):
        scene = _scene([1, 2])
        with pytest.raises(MalformedInputError):
            ensemble(scene, Oversegmentation(np.array([1])), 0.5)

    def test_empty_scene(self):
        out = ensemble(LabeledCloud.empty(), Oversegmentation(np.empty(0, dtype=np.int64)), 0.5)
        assert len(out) == 0
