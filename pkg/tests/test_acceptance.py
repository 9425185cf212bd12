"""Acceptance suite: one test per release criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -s`` to see the verdict lines.
"""

import json
import time
from contextlib import contextmanager

import numpy as np
import pytest

from sgr.config import config_from_dict
from sgr.datasets import write_dataset
from sgr.errors import TaskParseError
from sgr.fusion import FusionWeights, combine_object_embedding, running_average
from sgr.graph import LAYER_BUILDING, LAYER_OBJECT, LAYER_PLACE, LAYER_ROOM
from sgr.pipeline import SceneGraphBuilder, build_from_dataset
from sgr.providers import MockProvider, ScriptEntry
from sgr.reasoning import parse_task, run_task, score_reasoning
from sgr.room_features import kmeans
from sgr.search import auc_topk, topk_accuracy

from conftest import make_mock
from scenes import TWO_ROOM_POSES, pair_scene, pair_stream, random_stream, room_of_pose, two_room_frames, two_room_scene
from test_reasoning import PALETTE, PLAN_JSON, trash_graph, trash_scene_mock
from test_room_features import brute_force_two_partition, wcss_of


@contextmanager
def criterion(name: str):
    try:
        yield
    except BaseException:
        print(f"ACCEPTANCE FAIL {name}")
        raise
    print(f"ACCEPTANCE PASS {name}")


def pipeline_config():
    return config_from_dict(
        {
            "seed": 7,
            "provider": {"kind": "mock", "embedding_dim": 16, "relation_dim": 12},
            "reconstruction": {"door_radius": 0.1, "room_cycle_stride": 2},
            "rooms": {"feature_clusters": 2},
            "search": {"object_threshold": 0.9, "room_threshold": 0.9},
        }
    )


def make_builder(scene, config=None) -> SceneGraphBuilder:
    config = config or pipeline_config()
    provider = MockProvider(
        seed=config.seed,
        embedding_dim=config.provider.embedding_dim,
        relation_dim=config.provider.relation_dim,
        palette=scene.palette,
        color_labels=scene.label_names,
    )
    return SceneGraphBuilder(config, provider, scene.palette)


@pytest.fixture(scope="module")
def long_random_stream():
    return random_stream(seed=123, frame_count=200)


# --------------------------------------------------------------- criterion 1


def test_fusion_exactness_running_average_equals_mean():
    with criterion("fusion-exactness (1000 random sequences, <5s)"):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        for _ in range(1000):
            length = int(rng.integers(1, 101))
            dim = int(rng.integers(1, 65))
            seq = rng.normal(size=(length, dim)) * float(rng.uniform(0.1, 100.0))
            mean, count = None, 0
            for vec in seq:
                mean, count = running_average(mean, count, vec)
            direct = seq.mean(axis=0)
            assert count == length
            scale = np.maximum(np.abs(direct), 1e-30)
            assert np.max(np.abs(mean - direct) / scale) < 1e-9
        elapsed = time.perf_counter() - start
        assert elapsed < 5.0, f"took {elapsed:.2f}s"


# --------------------------------------------------------------- criterion 2


def test_weighted_combination_contract():
    with criterion("weighted-combination contract (weight sum, identity)"):
        with pytest.raises(ValueError):
            FusionWeights(0.4, 0.4, 0.2 + 2e-9)
        with pytest.raises(ValueError):
            FusionWeights(0.3, 0.3, 0.3)
        FusionWeights(0.4, 0.4, 0.2 + 0.5e-9)  # within tolerance
        u = np.array([0.125, -3.5, 42.0, 1e-7])
        out = combine_object_embedding(u, u, u, FusionWeights(0.4, 0.4, 0.2))
        np.testing.assert_array_equal(out, u)


# --------------------------------------------------------------- criterion 3


def test_graph_invariants_over_randomized_stream(long_random_stream):
    with criterion("graph invariants over a 200-frame randomized stream"):
        scene, frames = long_random_stream
        builder = make_builder(scene)
        stride = builder.config.reconstruction.room_cycle_stride
        for index, (frame, detections) in enumerate(frames):
            builder.process_frame(frame, detections)
            problems = builder.graph.validate()
            assert problems == [], f"cycle {index}: {problems}"
            graph = builder.graph
            for oid in graph.node_ids(LAYER_OBJECT):
                assert graph.parent_of(oid) in graph.nodes(LAYER_PLACE)
            if (index + 1) % stride == 0:
                for pid in graph.node_ids(LAYER_PLACE):
                    assert graph.parent_of(pid) in graph.nodes(LAYER_ROOM)
        builder.finalize()
        assert builder.graph.validate() == []
        for pid in builder.graph.node_ids(LAYER_PLACE):
            assert builder.graph.parent_of(pid) in builder.graph.nodes(LAYER_ROOM)


# --------------------------------------------------------------- criterion 4


def test_replay_determinism_byte_identical(tmp_path):
    with criterion("replay determinism (byte-identical serialized graphs)"):
        scene = two_room_scene()
        dataset = write_dataset(
            tmp_path / "ds",
            name="two-room",
            embedding_dim=16,
            label_palette=scene.palette,
            label_names=scene.label_names,
            frames=two_room_frames(),
        )
        build_from_dataset(dataset, pipeline_config(), out_dir=tmp_path / "a")
        build_from_dataset(dataset, pipeline_config(), out_dir=tmp_path / "b")
        first = (tmp_path / "a" / "graph.json").read_bytes()
        second = (tmp_path / "b" / "graph.json").read_bytes()
        assert first == second


# --------------------------------------------------------------- criterion 5


def test_retrieval_matches_brute_force_oracle():
    with criterion("retrieval oracle equivalence (Acc_k vs full sort, monotone, anchored Acc_1)"):
        provider = make_mock(dim=24, seed=31)
        vocabulary = [f"category {i:03d}" for i in range(480)]
        rng = np.random.default_rng(17)
        features, labels = [], []
        for i in range(50):
            label = vocabulary[int(rng.integers(0, len(vocabulary)))]
            labels.append(label)
            anchor = provider.embed_text(label)
            if i % 3 == 0:
                features.append(anchor.copy())  # exact
            elif i % 3 == 1:
                decoy = provider.embed_text(vocabulary[int(rng.integers(0, len(vocabulary)))])
                features.append(0.55 * anchor + 0.45 * decoy)  # adversarial mix
            else:
                features.append(rng.normal(size=24))  # unrelated
        ks = [1, 2, 5, 10]
        acc = topk_accuracy(features, labels, vocabulary, provider, ks=ks)
        vocab_vectors = [provider.embed_text(v) for v in vocabulary]
        for k in ks:
            hits = 0
            for feature, label in zip(features, labels):
                sims = [
                    (float(np.dot(feature, v) / (np.linalg.norm(feature) * np.linalg.norm(v))), i)
                    for i, v in enumerate(vocab_vectors)
                ]
                ranked = [i for _, i in sorted(sims, key=lambda t: (-t[0], t[1]))]
                hits += vocabulary.index(label) in ranked[:k]
            assert acc[k] == hits / 50, f"Acc_{k} mismatch with full-sort oracle"
        values = [acc[k] for k in ks]
        assert values == sorted(values), "Acc_k must be monotone in k"
        # anchored subset: exact embeddings retrieve their label at rank 1
        exact = [(f, l) for i, (f, l) in enumerate(zip(features, labels)) if i % 3 == 0]
        acc1 = topk_accuracy([f for f, _ in exact], [l for _, l in exact], vocabulary, provider, ks=[1])
        assert acc1[1] == 1.0


# --------------------------------------------------------------- criterion 6


def test_auc_contract():
    with criterion("AUC contract (constants, dominance monotonicity)"):
        ks = list(range(1, 51, 7))
        assert abs(auc_topk({k: 1.0 for k in ks}, 50) - 100.0) <= 1e-9
        assert abs(auc_topk({k: 0.5 for k in ks}, 50) - 50.0) <= 1e-9
        rng = np.random.default_rng(99)
        for _ in range(100):
            low = {k: float(rng.uniform(0.0, 1.0)) for k in ks}
            high = {k: min(1.0, low[k] + float(rng.uniform(0.0, 0.4))) for k in ks}
            assert auc_topk(high, 50) >= auc_topk(low, 50) - 1e-12


# --------------------------------------------------------------- criterion 7


def test_rooms_door_erosion_containment_and_kmeans():
    with criterion("rooms (1-voxel door -> 2 rooms, pose containment, k-means oracle)"):
        scene = two_room_scene()
        builder = make_builder(scene)  # door_radius 0.1 m = 1 voxel
        for frame, detections in two_room_frames():
            builder.process_frame(frame, detections)
        builder.finalize()
        graph = builder.graph
        rooms = graph.nodes(LAYER_ROOM)
        assert len(rooms) == 2
        room_by_side = {0 if room.centroid[0] < 3.05 else 1: rid for rid, room in rooms.items()}
        assert set(room_by_side) == {0, 1}
        # containment oracle: every recorded pose lands in its known room
        assert len(builder.pose_store.entries) == len(TWO_ROOM_POSES)
        for (x, y), entry in zip(TWO_ROOM_POSES, builder.pose_store.entries):
            cell = builder.grid.cell_2d(entry.pose.position)
            expected = rooms[room_by_side[room_of_pose(x, y)]]
            other = rooms[room_by_side[1 - room_of_pose(x, y)]]
            assert expected.contains_cell(cell)
            assert not other.contains_cell(cell)
        # k-means: self-consistency and exact optimality on a 12-point fixture
        rng = np.random.default_rng(5)
        pts = np.vstack(
            [
                rng.normal(loc=(0.0, 0.0), scale=0.05, size=(6, 2)),
                rng.normal(loc=(5.0, 5.0), scale=0.05, size=(6, 2)),
            ]
        )
        centroids = kmeans(pts, 2, seed=3)
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assignment = np.argmin(d2, axis=1)
        for i in range(2):
            np.testing.assert_allclose(centroids[i], pts[assignment == i].mean(axis=0), atol=1e-6)
        assert wcss_of(pts, centroids) == pytest.approx(brute_force_two_partition(pts), abs=1e-9)


# --------------------------------------------------------------- criterion 8


def test_relations_scripted_stream():
    with criterion("relations (co-observed 4x -> count 4, exact mean, no transient ids)"):
        from sgr.imaging import pair_crop_inpainted

        scene = pair_scene()
        builder = make_builder(scene)
        expected = []
        for frame, detections in pair_stream():
            if detections is not None and len(detections) == 2:
                crop = pair_crop_inpainted(
                    frame.rgb,
                    detections.boxes[0],
                    detections.boxes[1],
                    detections.labels[0],
                    detections.labels[1],
                    scene.palette,
                )
                expected.append(builder.provider.visual_encode(crop))
            builder.process_frame(frame, detections)
            assert builder.grid.transient_counts()[1] == 0
        builder.finalize()
        assert len(expected) == 4
        by_label = {n.label: nid for nid, n in builder.graph.nodes(LAYER_OBJECT).items()}
        edge = builder.graph.relation_between(by_label[0], by_label[1])
        assert edge is not None and edge.update_count == 4
        direct_mean = np.mean(expected, axis=0)
        scale = np.maximum(np.abs(direct_mean), 1e-30)
        assert np.max(np.abs(edge.feature - direct_mean) / scale) < 1e-9


# --------------------------------------------------------------- criterion 9


def test_reasoning_end_to_end_scripted():
    with criterion("reasoning end-to-end (SR 100/FP 0 x10, zero-call short-circuit, retry/exhaustion)"):
        reference = None
        for repeat in range(10):
            provider = trash_scene_mock()
            graph, bags, can = trash_graph(provider)
            report = run_task(
                "dispose of all trash",
                graph,
                provider,
                palette=PALETTE,
                object_threshold=0.9,
                room_threshold=0.9,
            )
            scores = score_reasoning(
                [report], {"positive_pairs": [[bag, can] for bag in bags]}
            )
            assert scores["sr_percent"] == 100.0
            assert scores["fp"] == 0
            encoded = json.dumps(report.to_json_dict(), sort_keys=True)
            if reference is None:
                reference = encoded
            assert encoded == reference, f"repeat {repeat} diverged"
        # absent objects: no describing-model calls at all
        provider = trash_scene_mock()
        from sgr.graph import SceneGraph

        report = run_task(
            "dispose of all trash",
            SceneGraph(),
            provider,
            palette=PALETTE,
            object_threshold=0.9,
            room_threshold=0.9,
        )
        assert report.verdicts == []
        assert provider.calls["describe"] == 0
        # retry path: prose then valid JSON
        retry_provider = make_mock(
            chat_script=[
                ScriptEntry(response="not json, sorry", max_uses=1),
                ScriptEntry(response=PLAN_JSON, max_uses=1),
            ]
        )
        plan = parse_task("dispose of all trash", retry_provider, max_retries=2)
        assert plan.retry_count == 1
        # exhaustion: malformed three times with max_retries=2
        broken_provider = make_mock(chat_script=[ScriptEntry(response="{nope")])
        with pytest.raises(TaskParseError) as excinfo:
            parse_task("dispose of all trash", broken_provider, max_retries=2)
        assert len(excinfo.value.raw_responses) == 3


# -------------------------------------------------------------- criterion 10


def test_throughput_200_frames_under_budget(long_random_stream, capsys):
    with criterion("throughput (200-frame build < 60 s, timing report emitted)"):
        scene, frames = long_random_stream
        builder = make_builder(scene)
        start = time.perf_counter()
        for frame, detections in frames:
            builder.process_frame(frame, detections)
        builder.finalize()
        elapsed = time.perf_counter() - start
        assert elapsed < 60.0, f"build took {elapsed:.1f}s"
        report = builder.timer.report()
        assert "stage timings" in report
        for stage in ("object_features", "integration", "clustering", "places", "relations", "rooms"):
            assert stage in report
        with capsys.disabled():
            print(f"\n200-frame build: {elapsed:.1f}s")
            print(report, end="")
