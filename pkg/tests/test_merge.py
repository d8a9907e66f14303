"""Merge tests: correspondence search, overlap voting, union-find, reduction tree."""

import numpy as np
import pytest

from masklift import (
    CorrespondenceSet,
    LabeledCloud,
    MalformedInputError,
    MergeConfig,
    OverlapStats,
    UnionFind,
    bidirectional_merge,
    bottom_up_merge,
    find_correspondences,
    merge_decisions,
    overlap_stats,
)
from masklift.merge import pair_schedule

from conftest import make_cloud


def brute_force_correspondences(p1, p2, radius):
    """All-pairs reference: nearest neighbor within radius, ties to smaller j."""
    pairs = []
    for i, q in enumerate(p1):
        d2 = np.sum((p2 - q) ** 2, axis=1)
        best_j, best_d2 = -1, radius * radius
        for j, dd in enumerate(d2):
            if dd <= best_d2 and (best_j == -1 or dd < best_d2):
                best_j, best_d2 = j, dd
        if best_j >= 0:
            pairs.append((i, best_j))
    return pairs


class TestFindCorrespondences:
    def test_identical_clouds_give_identity(self):
        pts = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
        c = make_cloud(pts, [1, 1, 1])
        corr = find_correspondences(c, c, 0.1)
        assert corr.pairs.tolist() == [[0, 0], [1, 1], [2, 2]]

    def test_matches_brute_force(self, rng):
        for trial in range(60):
            n1 = int(rng.integers(1, 60))
            n2 = int(rng.integers(1, 60))
            scale = float(rng.uniform(0.5, 3.0))
            p1 = rng.uniform(-scale, scale, size=(n1, 3)).astype(np.float32)
            p2 = rng.uniform(-scale, scale, size=(n2, 3)).astype(np.float32)
            radius = float(rng.uniform(0.05, 1.0))
            c1 = LabeledCloud(p1, np.zeros(n1, dtype=int))
            c2 = LabeledCloud(p2, np.zeros(n2, dtype=int))
            got = find_correspondences(c1, c2, radius).pairs.tolist()
            want = brute_force_correspondences(
                p1.astype(np.float64), p2.astype(np.float64), radius
            )
            assert got == [list(p) for p in want], f"trial {trial}"

    def test_radius_is_inclusive(self):
        c1 = make_cloud([[0.0, 0, 0]], [0])
        c2 = make_cloud([[0.5, 0, 0]], [0])
        assert len(find_correspondences(c1, c2, 0.5)) == 1
        assert len(find_correspondences(c1, c2, 0.4999)) == 0

    def test_tie_goes_to_smaller_index(self):
        c1 = make_cloud([[0.0, 0, 0]], [0])
        c2 = make_cloud([[0.3, 0, 0], [-0.3, 0, 0]], [0, 0])
        assert find_correspondences(c1, c2, 1.0).pairs.tolist() == [[0, 0]]
        c2_swapped = make_cloud([[-0.3, 0, 0], [0.3, 0, 0]], [0, 0])
        assert find_correspondences(c1, c2_swapped, 1.0).pairs.tolist() == [[0, 0]]

    def test_empty_inputs(self):
        c = make_cloud([[0.0, 0, 0]], [1])
        assert len(find_correspondences(LabeledCloud.empty(), c, 0.1)) == 0
        assert len(find_correspondences(c, LabeledCloud.empty(), 0.1)) == 0


class TestOverlapStats:
    def test_counts_match_hand_example(self):
        # 10 points of mask 1 in x1; 6 of them matched to points of mask 2
        # in x2, which holds 8 points of mask 2.
        p1 = np.zeros((10, 3))
        p1[:, 0] = np.arange(10)
        x1 = make_cloud(p1, [1] * 10)
        p2 = np.zeros((8, 3))
        p2[:, 0] = np.arange(8)
        x2 = make_cloud(p2, [2] * 8)
        pairs = np.array([[i, i] for i in range(6)])
        stats = overlap_stats(x1, x2, CorrespondenceSet(pairs))
        assert stats.count1 == {1: 10}
        assert stats.count2 == {2: 8}
        assert stats.cross == {(1, 2): 6}

    def test_zero_labels_ignored(self):
        x1 = make_cloud([[0, 0, 0], [1, 0, 0]], [0, 1])
        x2 = make_cloud([[0, 0, 0], [1, 0, 0]], [2, 0])
        stats = overlap_stats(x1, x2, CorrespondenceSet(np.array([[0, 0], [1, 1]])))
        assert stats.count1 == {1: 1}
        assert stats.count2 == {2: 1}
        assert stats.cross == {}

    def test_out_of_range_indices_rejected(self):
        x1 = make_cloud([[0, 0, 0]], [1])
        with pytest.raises(MalformedInputError):
            overlap_stats(x1, x1, CorrespondenceSet(np.array([[0, 5]])))


class TestMergeDecisions:
    def test_above_threshold_merges(self):
        stats = OverlapStats({1: 10}, {2: 8}, {(1, 2): 6})
        assert merge_decisions(stats, 0.5) == [(1, 2)]  # 6 > 0.5 * 8

    def test_boundary_equality_does_not_merge(self):
        stats = OverlapStats({1: 10}, {2: 8}, {(1, 2): 4})
        assert merge_decisions(stats, 0.5) == []  # 4 > 4 is false

    def test_min_uses_smaller_mask(self):
        stats = OverlapStats({1: 4}, {2: 100}, {(1, 2): 3})
        assert merge_decisions(stats, 0.5) == [(1, 2)]  # 3 > 0.5 * 4


class TestUnionFind:
    def test_representative_is_smallest(self):
        uf = UnionFind()
        uf.union(5, 3)
        uf.union(3, 9)
        assert uf.find(9) == 3
        assert uf.find(5) == 3
        assert uf.find(3) == 3
        assert uf.find(42) == 42

    def test_canonical_maps_labels(self):
        uf = UnionFind()
        uf.union(2, 7)
        labels = np.array([0, 7, 2, 5, 7])
        np.testing.assert_array_equal(uf.canonical(labels), [0, 2, 2, 5, 2])

    def test_chained_unions(self, rng):
        for _ in range(50):
            uf = UnionFind()
            edges = rng.integers(1, 30, size=(40, 2))
            adj = {}
            for a, b in edges:
                uf.union(int(a), int(b))
                adj.setdefault(int(a), set()).add(int(b))
                adj.setdefault(int(b), set()).add(int(a))
            # breadth-first components as the reference
            seen = {}
            for start in sorted(adj):
                if start in seen:
                    continue
                queue, comp = [start], {start}
                while queue:
                    node = queue.pop()
                    for nxt in adj[node]:
                        if nxt not in comp:
                            comp.add(nxt)
                            queue.append(nxt)
                rep = min(comp)
                for node in comp:
                    seen[node] = rep
            for node, rep in seen.items():
                assert uf.find(node) == rep


def _two_cluster_clouds():
    """x1: one mask over a line of 8 points; x2: same line, shifted labels."""
    pts = np.zeros((8, 3))
    pts[:, 0] = np.arange(8) * 0.01
    x1 = make_cloud(pts, [1] * 8)
    x2 = make_cloud(pts, [2] * 8)
    return x1, x2


class TestBidirectionalMerge:
    def test_same_surface_unifies(self):
        x1, x2 = _two_cluster_clouds()
        cfg = MergeConfig(delta=0.5, voxel_size=0.05, pool_after_merge=False)
        merged = bidirectional_merge(x1, x2, cfg)
        assert set(merged.labels.tolist()) == {1}
        assert len(merged) == 16

    def test_boundary_overlap_does_not_unify(self):
        # Exactly half of each mask overlaps: sigma = 4 = 0.5 * min(8, 8).
        pts1 = np.zeros((8, 3))
        pts1[:, 0] = np.arange(8)
        pts2 = np.zeros((8, 3))
        pts2[:, 0] = np.arange(4, 12)
        x1 = make_cloud(pts1, [1] * 8)
        x2 = make_cloud(pts2, [2] * 8)
        cfg = MergeConfig(delta=0.5, match_radius=0.1, pool_after_merge=False)
        merged = bidirectional_merge(x1, x2, cfg)
        assert set(merged.labels.tolist()) == {1, 2}

    def test_swap_invariance_of_classes(self, rng):
        for _ in range(30):
            n1, n2 = int(rng.integers(5, 60)), int(rng.integers(5, 60))
            p1 = rng.uniform(0, 1, size=(n1, 3)).astype(np.float32)
            p2 = rng.uniform(0, 1, size=(n2, 3)).astype(np.float32)
            l1 = rng.integers(0, 4, size=n1)
            l2 = rng.integers(4, 8, size=n2)
            l2[l2 == 4] = 0
            a = LabeledCloud(p1, l1)
            b = LabeledCloud(p2, l2)
            cfg = MergeConfig(delta=0.5, match_radius=0.2, pool_after_merge=False)
            ab = bidirectional_merge(a, b, cfg)
            ba = bidirectional_merge(b, a, cfg)
            # same unified classes regardless of argument order
            def classes(cloud):
                out = {}
                for lab in cloud.labels.tolist():
                    if lab:
                        out.setdefault(lab, 0)
                return set(out)
            assert classes(ab) == classes(ba)

    def test_rejects_shared_labels(self):
        x1, _ = _two_cluster_clouds()
        with pytest.raises(MalformedInputError):
            bidirectional_merge(x1, x1, MergeConfig())

    def test_pooling_applied_when_enabled(self):
        x1, x2 = _two_cluster_clouds()
        merged = bidirectional_merge(x1, x2, MergeConfig(voxel_size=1.0))
        assert len(merged) == 1
        assert merged.labels.tolist() == [1]


class TestBottomUpMerge:
    def _frame_clouds(self, k):
        clouds = []
        pts = np.zeros((4, 3))
        pts[:, 0] = np.arange(4) * 0.01
        for f in range(k):
            clouds.append(make_cloud(pts, [f + 1] * 4))
        return clouds

    def test_four_clouds_three_merges_two_levels(self):
        merged, trace = bottom_up_merge(self._frame_clouds(4), MergeConfig(pool_after_merge=False))
        assert len(trace.levels) == 2
        assert trace.total_merges == 3
        assert set(merged.labels.tolist()) == {1}

    def test_five_clouds_carry_trailing(self):
        merged, trace = bottom_up_merge(self._frame_clouds(5), MergeConfig(pool_after_merge=False))
        assert len(trace.levels) == 3
        assert trace.total_merges == 4
        assert [len(lv) for lv in trace.levels] == [2, 1, 1]
        # level 0 merges (0,1) and (2,3); cloud 4 rides along
        assert [(r.left, r.right) for r in trace.levels[0]] == [(0, 1), (2, 3)]

    def test_tree_shape_across_sizes(self):
        for k in range(1, 65):
            _, trace = bottom_up_merge(self._frame_clouds(k), MergeConfig(voxel_size=1.0))
            assert trace.total_merges == k - 1, k
            assert len(trace.levels) == int(np.ceil(np.log2(k))), k

    def test_single_cloud_passthrough(self):
        clouds = self._frame_clouds(1)
        merged, trace = bottom_up_merge(clouds, MergeConfig(pool_after_merge=False))
        np.testing.assert_array_equal(merged.points, clouds[0].points)
        assert trace.levels == []

    def test_thread_count_does_not_change_result(self, rng):
        clouds = []
        for f in range(9):
            n = int(rng.integers(10, 50))
            pts = rng.uniform(0, 1, size=(n, 3)).astype(np.float32)
            labels = rng.integers(0, 3, size=n)
            labels[labels > 0] += f * 10
            clouds.append(LabeledCloud(pts, labels))
        cfg = MergeConfig(delta=0.5, voxel_size=0.1)
        seq, trace_seq = bottom_up_merge(clouds, cfg, threads=1)
        par, trace_par = bottom_up_merge(clouds, cfg, threads=8)
        np.testing.assert_array_equal(seq.points, par.points)
        np.testing.assert_array_equal(seq.labels, par.labels)
        assert trace_seq.to_json() == trace_par.to_json()

    def test_empty_list_rejected(self):
        with pytest.raises(MalformedInputError):
            bottom_up_merge([], MergeConfig())


class TestPairSchedule:
    def test_matches_trace_layout(self):
        assert pair_schedule(1) == []
        assert pair_schedule(2) == [[(0, 1)]]
        assert pair_schedule(5) == [[(0, 1), (2, 3)], [(0, 1)], [(0, 1)]]
        for k in range(1, 40):
            levels = pair_schedule(k)
            assert sum(len(lv) for lv in levels) == k - 1
