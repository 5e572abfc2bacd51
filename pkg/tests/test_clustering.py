import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rigidflow import synth
from rigidflow.cloud import TimedPointCloud
from rigidflow.clustering import (ClusterConfig, HardClustering, UnionFind, euclidean_clusters,
                                  merge_clusters, relabel_compact, soft_cluster_list, soft_clusters,
                                  spatiotemporal_hard_clusters)
from rigidflow.spatial import SpatialIndex

from .oracles import brute_components, brute_knn, same_partition

clouds = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(3)),
                elements=st.floats(-2, 2, allow_nan=False))
grid = arrays(np.float64, st.tuples(st.integers(2, 30), st.just(3)),
              elements=st.integers(-2, 2).map(lambda v: v * 0.15))


def test_chain_is_one_cluster():
    hard = euclidean_clusters([[0, 0, 0], [0.25, 0, 0], [0.5, 0, 0]], 0.3)
    assert hard.num_clusters == 1


def test_two_groups():
    pts = np.array([[0, 0, 0], [0.1, 0, 0], [1.1, 0, 0], [1.2, 0, 0]])
    assert list(euclidean_clusters(pts, 0.3).labels) == [0, 0, 1, 1]


def test_radius_is_inclusive():
    assert euclidean_clusters([[0, 0, 0], [0.25, 0, 0]], 0.25).num_clusters == 1


@settings(max_examples=100, deadline=None)
@given(clouds, st.floats(0.0, 1.5))
def test_components_match_bfs_oracle(pts, radius):
    assert same_partition(euclidean_clusters(pts, radius).labels, brute_components(pts, radius))


@settings(max_examples=100, deadline=None)
@given(grid, st.sampled_from([0.0, 0.15, 0.3, 0.15 * np.sqrt(2.0)]))
def test_components_match_oracle_on_exact_boundaries(pts, radius):
    assert same_partition(euclidean_clusters(pts, radius).labels, brute_components(pts, radius))


@settings(max_examples=60, deadline=None)
@given(clouds, st.floats(0.05, 1.0), st.randoms(use_true_random=False))
def test_permutation_invariance(pts, radius, rnd):
    perm = np.array(rnd.sample(range(len(pts)), len(pts)))
    a = euclidean_clusters(pts, radius).labels
    b = euclidean_clusters(pts[perm], radius).labels
    assert same_partition(a[perm], b)


def test_relabel_compact():
    assert list(relabel_compact([5, 5, 9]).labels) == [0, 0, 1]
    assert list(relabel_compact([0, 1, 1, 2]).labels) == [0, 1, 1, 2]
    empty = relabel_compact([])
    assert len(empty) == 0 and empty.num_clusters == 0


def test_hard_clustering_validates_labels():
    with pytest.raises(ValueError):
        HardClustering(np.array([0, 2]), 3)
    with pytest.raises(ValueError):
        HardClustering(np.array([0, -1]), 2)
    hard = HardClustering(np.array([1, 0, 1]), 2)
    assert [list(m) for m in hard.members()] == [[1], [0, 2]]


def test_union_find_smaller_root_wins():
    uf = UnionFind(4)
    uf.union(3, 1)
    uf.union(2, 3)
    assert list(uf.roots()) == [0, 1, 1, 1]


def test_window_of_one_frame_equals_single_frame():
    pts = np.random.default_rng(0).uniform(0, 2, size=(60, 3))
    a = spatiotemporal_hard_clusters([TimedPointCloud(pts)], ClusterConfig(radius=0.3))
    b = euclidean_clusters(pts, 0.3)
    assert np.array_equal(a.labels, b.labels)


def test_empty_history_equals_single_frame():
    pts = np.random.default_rng(1).uniform(0, 2, size=(60, 3))
    empty = TimedPointCloud(np.zeros((0, 3)))
    a = spatiotemporal_hard_clusters([empty, empty, TimedPointCloud(pts)])
    assert np.array_equal(a.labels, euclidean_clusters(pts, 0.3).labels)


def test_bridge_from_earlier_frame_joins_parts():
    part_a = np.array([[0.0, 0, 0], [0.2, 0, 0]])
    part_b = part_a + [0.7, 0, 0]
    current = TimedPointCloud(np.vstack([part_a, part_b]))
    bridge = TimedPointCloud(np.array([[0.45, 0, 0]]))
    alone = spatiotemporal_hard_clusters([current])
    joined = spatiotemporal_hard_clusters([bridge, current])
    assert alone.num_clusters == 2 and joined.num_clusters == 1
    stacked = np.vstack([bridge.points, current.points])
    oracle = brute_components(stacked, 0.3)[1:]
    assert same_partition(joined.labels, oracle)


def test_horizon_limits_the_window():
    part_a = np.array([[0.0, 0, 0]])
    current = TimedPointCloud(np.vstack([part_a, part_a + [0.5, 0, 0]]))
    bridge = TimedPointCloud(np.array([[0.25, 0, 0]]))
    far = TimedPointCloud(np.array([[9.0, 9, 9]]))
    cfg = ClusterConfig(horizon=2)
    assert spatiotemporal_hard_clusters([bridge, far, current], cfg).num_clusters == 2
    assert spatiotemporal_hard_clusters([far, bridge, current], cfg).num_clusters == 1


def test_soft_cluster_collinear():
    pts = np.array([[i * 0.1, 0, 0] for i in range(5)])
    members = soft_clusters(pts, 4)
    assert list(members[0]) == [0, 1, 2, 3, 4]
    assert list(members[4]) == [4, 3, 2, 1, 0]


@settings(max_examples=80, deadline=None)
@given(grid, st.integers(1, 8))
def test_soft_clusters_match_brute_knn(pts, k):
    k = min(k, len(pts) - 1)
    members = soft_clusters(pts, k)
    for m in range(len(pts)):
        others = np.delete(np.arange(len(pts)), m)
        want, _ = brute_knn(pts[others], pts[m], k)
        assert members[m, 0] == m
        assert list(members[m, 1:]) == list(others[want])
        assert m not in members[m, 1:]


def test_soft_clusters_need_enough_points():
    with pytest.raises(ValueError):
        soft_clusters(np.zeros((3, 3)), 3)


def test_soft_cluster_list():
    clusters = soft_cluster_list(soft_clusters(np.eye(3), 1))
    assert [c.anchor for c in clusters] == [0, 1, 2]


def _merge_setup():
    # two source clusters 1 m apart, target has them as one object after the flow
    p = np.array([[0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [1.1, 0, 0]], dtype=float)
    hard = HardClustering(np.array([0, 0, 1, 1]), 2)
    return p, hard


def test_merge_unanimous_vote():
    p, hard = _merge_setup()
    q = np.array([[5.0, 0, 0], [5.1, 0, 0], [5.2, 0, 0], [5.3, 0, 0]])
    flow = q - p
    merged = merge_clusters(hard, p, flow, HardClustering(np.zeros(4, dtype=np.int64), 1), SpatialIndex(q))
    assert merged.num_clusters == 1


def test_merge_different_targets_unchanged():
    p, hard = _merge_setup()
    q = p + 5.0
    merged = merge_clusters(hard, p, q - p, HardClustering(np.array([0, 0, 1, 1]), 2), SpatialIndex(q))
    assert np.array_equal(merged.labels, hard.labels)


def test_merge_needs_votes_within_cap():
    p, hard = _merge_setup()
    q = np.array([[5.0, 0, 0], [5.1, 0, 0], [5.2, 0, 0], [5.3, 0, 0]])
    merged = merge_clusters(hard, p, np.zeros_like(p), HardClustering(np.zeros(4, dtype=np.int64), 1),
                            SpatialIndex(q))
    assert np.array_equal(merged.labels, hard.labels)


def test_merge_vote_fraction():
    # cluster 1 sends 2 of 3 votes to target 0: merges at 0.6 but not at 0.7
    p = np.array([[0, 0, 0], [0.1, 0, 0], [1.0, 0, 0], [1.1, 0, 0], [1.2, 0, 0]], dtype=float)
    hard = HardClustering(np.array([0, 0, 1, 1, 1]), 2)
    q = p.copy()
    q_lab = HardClustering(np.array([0, 0, 0, 0, 1]), 2)
    loose = merge_clusters(hard, p, np.zeros_like(p), q_lab, SpatialIndex(q), ClusterConfig(merge_vote_fraction=0.6))
    strict = merge_clusters(hard, p, np.zeros_like(p), q_lab, SpatialIndex(q), ClusterConfig(merge_vote_fraction=0.7))
    assert loose.num_clusters == 1 and strict.num_clusters == 2


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_merge_never_splits_and_reaches_fixed_point(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 40))
    p = rng.uniform(0, 3, size=(n, 3))
    q = rng.uniform(0, 3, size=(int(rng.integers(5, 40)), 3))
    flow = rng.normal(scale=0.3, size=(n, 3))
    hard = euclidean_clusters(p, rng.uniform(0.0, 0.6))
    q_lab = euclidean_clusters(q, rng.uniform(0.2, 1.0))
    index = SpatialIndex(q)
    current = hard
    for _ in range(hard.num_clusters + 1):
        merged = merge_clusters(current, p, flow, q_lab, index)
        same = current.labels[:, None] == current.labels[None, :]
        assert np.all((merged.labels[:, None] == merged.labels[None, :]) | ~same)
        if merged.num_clusters == current.num_clusters:
            break
        current = merged
    else:
        pytest.fail("merging did not reach a fixed point")


def test_crowd_scene_clustering_radii():
    spec = synth.crowd_scene()
    frame = synth.generate(spec)[0]
    ids = synth.object_ids(spec, 0)
    tight = euclidean_clusters(frame.points, 0.3).labels
    wide = euclidean_clusters(frame.points, 0.8).labels
    # radius 0.3: no cluster holds a pedestrian (objects 1-4) together with anything else
    for ped in range(1, 5):
        for c in np.unique(tight[ids == ped]):
            assert np.all(ids[tight == c] == ped)
    # radius 0.8: every pedestrian joins the wall (object 0)
    wall = np.unique(wide[ids == 0])
    assert len(wall) == 1
    for ped in range(1, 5):
        assert np.all(wide[ids == ped] == wall[0])


def test_config_validation():
    with pytest.raises(ValueError):
        ClusterConfig(radius=-0.1)
    with pytest.raises(ValueError):
        ClusterConfig(merge_vote_fraction=0.5)
    assert ClusterConfig(radius=0.0).radius == 0.0
