from itertools import product

import numpy as np
import pytest

from sgr.datasets import Pose
from sgr.errors import ProviderError
from sgr.graph import LAYER_ROOM, RoomNode, SceneGraph
from sgr.providers import MockProvider
from sgr.room_features import (
    PoseEmbeddingStore,
    assign_room_features,
    kmeans,
    record_pose_embedding,
)
from sgr.voxel import SemanticVoxelGrid

from scenes import two_room_scene

UP = (1.0, 0.0, 0.0, 0.0)


def pose_at(x, y, z=1.0) -> Pose:
    return Pose(position=(x, y, z), orientation=UP)


# --------------------------------------------------------------------- store


def test_store_appends_in_time_order():
    store = PoseEmbeddingStore()
    store.append(pose_at(0, 0), np.ones(3), 0.0)
    store.append(pose_at(1, 0), np.ones(3), 1.0)
    assert len(store) == 2
    with pytest.raises(ValueError, match="time order"):
        store.append(pose_at(2, 0), np.ones(3), 0.5)


def test_record_pose_embedding_appends():
    scene = two_room_scene()
    frame, _ = scene.render(0.8, 0.8, timestamp=0.0)
    store = PoseEmbeddingStore()
    provider = MockProvider(seed=1, embedding_dim=4, relation_dim=4)
    record_pose_embedding(store, frame.pose, frame, provider)
    assert len(store) == 1
    assert store.entries[0].embedding.shape == (4,)


def test_record_pose_embedding_skips_on_provider_failure():
    class FailingProvider:
        def embed_image(self, image):
            raise ProviderError("down")

    scene = two_room_scene()
    frame, _ = scene.render(0.8, 0.8, timestamp=0.0)
    store = PoseEmbeddingStore()
    record_pose_embedding(store, frame.pose, frame, FailingProvider())
    assert len(store) == 0


# -------------------------------------------------------------------- kmeans


def test_kmeans_k1_is_global_mean():
    pts = np.array([[0.0, 0.0], [2.0, 0.0], [1.0, 3.0]])
    centroids = kmeans(pts, 1, seed=0)
    np.testing.assert_allclose(centroids[0], pts.mean(axis=0), atol=1e-12)


def brute_force_two_partition(points: np.ndarray) -> float:
    """Optimal K=2 within-cluster sum of squares by exhaustive enumeration."""
    n = len(points)
    best = np.inf
    for bits in range(1, 2 ** (n - 1)):  # fix point 0 in cluster 0; skip empty split
        mask = np.array([(bits >> i) & 1 for i in range(n)], dtype=bool)
        for group in (points[mask], points[~mask]):
            if len(group) == 0:
                break
        else:
            wcss = sum(
                float(((group - group.mean(axis=0)) ** 2).sum())
                for group in (points[mask], points[~mask])
            )
            best = min(best, wcss)
    return best


def wcss_of(points: np.ndarray, centroids: np.ndarray) -> float:
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return float(d2.min(axis=1).sum())


def test_kmeans_two_separated_groups_match_group_means():
    rng = np.random.default_rng(8)
    left = rng.normal(loc=(0.0, 0.0), scale=0.05, size=(6, 2))
    right = rng.normal(loc=(10.0, 0.0), scale=0.05, size=(6, 2))
    pts = np.vstack([left, right])
    centroids = kmeans(pts, 2, seed=0)
    got = sorted(map(tuple, centroids))
    want = sorted(map(tuple, [left.mean(axis=0), right.mean(axis=0)]))
    np.testing.assert_allclose(got, want, atol=1e-6)
    # exact agreement with the exhaustive optimal two-partition
    assert wcss_of(pts, centroids) == pytest.approx(brute_force_two_partition(pts), abs=1e-9)


def test_kmeans_deterministic_for_fixed_seed():
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(30, 4))
    np.testing.assert_array_equal(kmeans(pts, 3, seed=5), kmeans(pts, 3, seed=5))


def test_kmeans_self_consistency_at_convergence():
    rng = np.random.default_rng(2)
    pts = rng.normal(size=(50, 3))
    centroids = kmeans(pts, 4, seed=3)
    d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    assignment = np.argmin(d2, axis=1)
    for i in range(4):
        members = pts[assignment == i]
        assert len(members) > 0
        np.testing.assert_allclose(centroids[i], members.mean(axis=0), atol=1e-6)


def test_kmeans_objective_monotone_over_iterations():
    rng = np.random.default_rng(6)
    for seed in range(5):
        pts = rng.normal(size=(40, 2))
        _, trace = kmeans(pts, 3, seed=seed, return_trace=True)
        assert all(a >= b - 1e-9 for a, b in zip(trace, trace[1:]))


def test_kmeans_orthogonal_duplicate_points():
    u = np.array([1.0, 0.0, 0.0, 0.0])
    v = np.array([0.0, 1.0, 0.0, 0.0])
    centroids = kmeans([u, u, v, v], 2, seed=0)
    got = sorted(map(tuple, np.round(centroids, 12)))
    assert got == sorted(map(tuple, [u, v]))


def test_kmeans_rejects_bad_inputs():
    with pytest.raises(ValueError):
        kmeans([], 1)
    with pytest.raises(ValueError):
        kmeans([[1.0]], 0)
    with pytest.raises(ValueError):
        kmeans([[1.0]], 2)


# ------------------------------------------------------------ room assignment


def two_room_graph_and_grid():
    """Rooms with hand-set extents: left covers x cells 1..9, right 11..19."""
    graph = SceneGraph()
    grid = SemanticVoxelGrid(0.1)
    left = graph.add_node(
        LAYER_ROOM,
        RoomNode(centroid=[0.5, 0.5, 1.0], extent={(x, y) for x in range(1, 10) for y in range(1, 10)}),
    )
    right = graph.add_node(
        LAYER_ROOM,
        RoomNode(centroid=[1.5, 0.5, 1.0], extent={(x, y) for x in range(11, 20) for y in range(1, 10)}),
    )
    return graph, grid, left, right


def test_assignment_routes_by_containment():
    graph, grid, left, right = two_room_graph_and_grid()
    store = PoseEmbeddingStore()
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    for i in range(2):
        store.append(pose_at(0.55, 0.55), u, float(len(store)))
        store.append(pose_at(0.55, 0.35), u, float(len(store)))
    assign_room_features(graph, store, k=2, grid=grid, seed=0)
    assert len(graph.nodes(LAYER_ROOM)[left].feature_clusters) == 2
    assert graph.nodes(LAYER_ROOM)[right].feature_clusters == []


def test_assignment_kmeans_over_orthogonal_embeddings():
    graph, grid, left, right = two_room_graph_and_grid()
    store = PoseEmbeddingStore()
    u = np.array([1.0, 0.0])
    v = np.array([0.0, 1.0])
    for i, emb in enumerate([u, u, v, v]):
        store.append(pose_at(0.55, 0.55), emb, float(i))
    assign_room_features(graph, store, k=2, grid=grid, seed=0)
    clusters = graph.nodes(LAYER_ROOM)[left].feature_clusters
    got = sorted(map(tuple, np.round(clusters, 12)))
    assert got == sorted(map(tuple, [u, v]))


def test_assignment_pads_when_fewer_samples_than_k():
    graph, grid, left, right = two_room_graph_and_grid()
    store = PoseEmbeddingStore()
    a = np.array([1.0, 2.0])
    b = np.array([3.0, 4.0])
    store.append(pose_at(0.55, 0.55), a, 0.0)
    store.append(pose_at(0.35, 0.35), b, 1.0)
    assign_room_features(graph, store, k=4, grid=grid, seed=0)
    clusters = graph.nodes(LAYER_ROOM)[left].feature_clusters
    assert len(clusters) == 2
    np.testing.assert_array_equal(clusters[0], a)
    np.testing.assert_array_equal(clusters[1], b)


def test_assignment_discards_out_of_room_entries():
    graph, grid, left, right = two_room_graph_and_grid()
    store = PoseEmbeddingStore()
    store.append(pose_at(5.0, 5.0), np.ones(2), 0.0)  # outside both extents
    assign_room_features(graph, store, k=2, grid=grid, seed=0)
    assert graph.nodes(LAYER_ROOM)[left].feature_clusters == []
    assert graph.nodes(LAYER_ROOM)[right].feature_clusters == []


def test_assignment_replaces_previous_clusters():
    graph, grid, left, right = two_room_graph_and_grid()
    graph.nodes(LAYER_ROOM)[left].feature_clusters = [np.array([9.0, 9.0])]
    store = PoseEmbeddingStore()
    assign_room_features(graph, store, k=2, grid=grid, seed=0)
    assert graph.nodes(LAYER_ROOM)[left].feature_clusters == []


def test_assignment_partitions_entries_at_most_one_room():
    # extents are disjoint by construction; the same entry never lands twice
    graph, grid, left, right = two_room_graph_and_grid()
    store = PoseEmbeddingStore()
    u = np.array([1.0, 0.0])
    for i in range(3):
        store.append(pose_at(1.15, 0.55), u, float(i))  # right room only
    assign_room_features(graph, store, k=1, grid=grid, seed=0)
    assert graph.nodes(LAYER_ROOM)[left].feature_clusters == []
    assert len(graph.nodes(LAYER_ROOM)[right].feature_clusters) == 1
