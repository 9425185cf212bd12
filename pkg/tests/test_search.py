import math

import numpy as np
import pytest

from sgr.graph import LAYER_OBJECT, LAYER_ROOM, ObjectNode, RoomNode, SceneGraph
from sgr.search import (
    auc_topk,
    cosine,
    filter_background,
    find_objects,
    find_rooms,
    retrieval_report,
    topk_accuracy,
)

from conftest import make_mock


def graph_with_objects(features_by_label: dict[str, np.ndarray], provider) -> SceneGraph:
    graph = SceneGraph()
    for i, (name, feature) in enumerate(sorted(features_by_label.items())):
        graph.add_node(
            LAYER_OBJECT,
            ObjectNode(
                centroid=[float(i), 0.0, 0.0],
                bbox=[i - 0.5, -0.5, -0.5, i + 0.5, 0.5, 0.5],
                label=i,
                feature=feature,
                update_count=1,
            ),
        )
    return graph


# -------------------------------------------------------------------- cosine


def test_cosine_basics():
    assert cosine([1.0, 0.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert cosine([1.0, 0.0], [0.0, 1.0]) == pytest.approx(0.0)
    # hand arithmetic: [1,1]·[1,0] / (sqrt(2)*1) = sqrt(2)/2
    assert cosine([1.0, 1.0], [1.0, 0.0]) == pytest.approx(math.sqrt(2.0) / 2.0)


def test_cosine_rejects_zero_vector_and_dim_mismatch():
    with pytest.raises(ValueError):
        cosine([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        cosine([1.0], [1.0, 0.0])


# ---------------------------------------------------------------- find_objects


def test_find_objects_anchor_fixture_rank_one():
    provider = make_mock()
    names = ["chair", "table", "lamp"]
    graph = graph_with_objects({n: provider.embed_text(n) for n in names}, provider)
    results = find_objects(graph, names, provider, threshold=0.9)
    for name in names:
        matches = results[name]
        assert len(matches) == 1
        assert matches[0].similarity == pytest.approx(1.0, abs=1e-9)


def test_find_objects_threshold_above_one_is_empty():
    provider = make_mock()
    graph = graph_with_objects({"chair": provider.embed_text("chair")}, provider)
    results = find_objects(graph, ["chair"], provider, threshold=1.1)
    assert results["chair"] == []


def test_find_objects_six_objects_brute_force_all_pairs():
    provider = make_mock()
    names = ["chair", "table", "lamp", "plant", "sofa", "shelf"]
    graph = graph_with_objects({n: provider.embed_text(n) for n in names}, provider)
    node_features = {nid: node.feature for nid, node in graph.nodes(LAYER_OBJECT).items()}
    results = find_objects(graph, names, provider, threshold=-1.0)
    for name in names:
        # oracle: all 36 similarities computed directly, sorted independently
        query = provider.embed_text(name)
        oracle = sorted(
            ((float(np.dot(query, f) / (np.linalg.norm(query) * np.linalg.norm(f))), -nid)
             for nid, f in node_features.items()),
            reverse=True,
        )
        best_node = -oracle[0][1]
        assert results[name][0].node == best_node
        assert results[name][0].similarity == pytest.approx(1.0, abs=1e-9)
        assert [m.node for m in results[name]] == [-(t[1]) for t in oracle]


def test_find_objects_grows_as_threshold_decreases():
    provider = make_mock()
    names = ["chair", "table", "lamp", "plant"]
    graph = graph_with_objects({n: provider.embed_text(n) for n in names}, provider)
    sizes = [
        len(find_objects(graph, ["chair"], provider, threshold=t)["chair"])
        for t in (0.99, 0.5, 0.0, -1.0)
    ]
    assert sizes == sorted(sizes)


def test_find_objects_skips_featureless_and_requires_names():
    provider = make_mock()
    graph = SceneGraph()
    graph.add_node(
        LAYER_OBJECT,
        ObjectNode(centroid=[0, 0, 0], bbox=[-1, -1, -1, 1, 1, 1], label=0),
    )
    assert find_objects(graph, ["chair"], provider, threshold=-1.0)["chair"] == []
    with pytest.raises(ValueError):
        find_objects(graph, [], provider, threshold=0.0)


def test_find_objects_ranking_invariant_to_feature_rescaling():
    provider = make_mock()
    names = ["chair", "table", "lamp"]
    graph = graph_with_objects({n: provider.embed_text(n) for n in names}, provider)
    baseline = find_objects(graph, names, provider, threshold=-1.0)
    for node in graph.nodes(LAYER_OBJECT).values():
        node.feature = node.feature * 37.5
    rescaled = find_objects(graph, names, provider, threshold=-1.0)
    for name in names:
        assert [m.node for m in baseline[name]] == [m.node for m in rescaled[name]]


# ----------------------------------------------------------------- find_rooms


def room_graph(clusters_by_room: dict[str, list[np.ndarray]]) -> tuple[SceneGraph, dict[str, int]]:
    graph = SceneGraph()
    ids = {}
    for i, (name, clusters) in enumerate(sorted(clusters_by_room.items())):
        ids[name] = graph.add_node(
            LAYER_ROOM, RoomNode(centroid=[float(i), 0.0, 0.0], feature_clusters=clusters)
        )
    return graph, ids


def test_find_rooms_perfect_match():
    provider = make_mock()
    q = provider.embed_text("kitchen")
    graph, ids = room_graph({"a": [q.copy(), q.copy()]})
    matches = find_rooms(graph, ["kitchen"], provider, threshold=0.9)
    assert [m.node for m in matches] == [ids["a"]]
    assert matches[0].similarity == pytest.approx(1.0, abs=1e-12)


def test_find_rooms_orthogonal_clusters_excluded():
    provider = make_mock(dim=4)
    graph, ids = room_graph({"a": [np.array([0.0, 0.0, 1.0, 0.0])]})
    q = np.zeros(4)
    q[0] = 1.0

    class FixedEmbedder:
        embedding_dim = 4

        def embed_text(self, text):
            return q

    assert find_rooms(graph, ["anything"], FixedEmbedder(), threshold=0.1) == []


def test_find_rooms_mean_matches_enumeration_oracle():
    # 2 rooms, 2 queries, K=2: hand-enumerate the four similarities per room
    e0 = np.array([1.0, 0.0, 0.0])
    e1 = np.array([0.0, 1.0, 0.0])
    e2 = np.array([0.0, 0.0, 1.0])
    queries = {"q0": e0, "q1": (e0 + e1) / np.linalg.norm(e0 + e1)}

    class TableEmbedder:
        embedding_dim = 3

        def embed_text(self, text):
            return queries[text]

    graph, ids = room_graph({"a": [e0, e1], "b": [e2, e1]})
    matches = find_rooms(graph, ["q0", "q1"], TableEmbedder(), threshold=-1.0)
    means = {m.node: m.similarity for m in matches}
    def oracle(clusters):
        sims = [
            float(np.dot(c, q) / (np.linalg.norm(c) * np.linalg.norm(q)))
            for c in clusters
            for q in queries.values()
        ]
        return sum(sims) / len(sims)

    assert means[ids["a"]] == pytest.approx(oracle([e0, e1]), abs=1e-12)
    assert means[ids["b"]] == pytest.approx(oracle([e2, e1]), abs=1e-12)
    assert [m.node for m in matches] == sorted(means, key=lambda n: -means[n])


# ---------------------------------------------------------- background filter


def test_filter_background_removes_anchored_wall():
    provider = make_mock()
    graph = graph_with_objects(
        {"wall": provider.embed_text("wall"), "chair": provider.embed_text("chair")}, provider
    )
    removed = filter_background(graph, ["wall", "floor", "ceiling"], provider, threshold=0.9)
    assert len(removed) == 1
    remaining = [n.feature for n in graph.nodes(LAYER_OBJECT).values()]
    assert len(remaining) == 1
    # the survivor is the chair: similarity to every background name stays low
    for name in ("wall", "floor", "ceiling"):
        assert cosine(remaining[0], provider.embed_text(name)) < 0.9


def test_filter_background_empty_list_removes_nothing():
    provider = make_mock()
    graph = graph_with_objects({"chair": provider.embed_text("chair")}, provider)
    assert filter_background(graph, [], provider, threshold=0.0) == []
    assert len(graph.nodes(LAYER_OBJECT)) == 1


# ------------------------------------------------------------- topk accuracy


def test_topk_exact_label_embeddings_acc1_is_one():
    provider = make_mock()
    vocab = ["chair", "table", "lamp", "plant", "sofa"]
    features = [provider.embed_text(name) for name in vocab]
    acc = topk_accuracy(features, vocab, vocab, provider, ks=[1, 2, 5])
    assert acc[1] == 1.0
    assert acc[5] == 1.0


def test_topk_k_at_vocab_size_is_one():
    provider = make_mock()
    vocab = ["a", "b", "c"]
    rng = np.random.default_rng(0)
    features = [rng.normal(size=provider.embedding_dim) for _ in vocab]
    acc = topk_accuracy(features, ["a", "b", "c"], vocab, provider, ks=[3])
    assert acc[3] == 1.0


def test_topk_matches_full_sort_oracle_on_adversarial_fixture():
    provider = make_mock(dim=16, seed=3)
    vocab = [f"word{i:03d}" for i in range(40)]
    rng = np.random.default_rng(7)
    true_labels = [vocab[int(rng.integers(0, 40))] for _ in range(5)]
    # adversarial: features interpolate between own label and a decoy
    features = []
    for i, label in enumerate(true_labels):
        decoy = vocab[(vocab.index(label) + 7) % 40]
        mix = 0.4 + 0.2 * i / 5
        vec = mix * provider.embed_text(label) + (1 - mix) * provider.embed_text(decoy)
        features.append(vec)
    ks = [1, 2, 5, 10]
    acc = topk_accuracy(features, true_labels, vocab, provider, ks=ks)
    # oracle: full sort of all similarities per object, rank membership count
    vocab_vectors = [provider.embed_text(v) for v in vocab]
    for k in ks:
        hits = 0
        for feature, label in zip(features, true_labels):
            sims = [
                (float(np.dot(feature, v) / (np.linalg.norm(feature) * np.linalg.norm(v))), idx)
                for idx, v in enumerate(vocab_vectors)
            ]
            ranked = [idx for _, idx in sorted(sims, key=lambda t: (-t[0], t[1]))]
            if vocab.index(label) in ranked[:k]:
                hits += 1
        assert acc[k] == hits / len(features)


def test_topk_monotone_in_k():
    provider = make_mock(dim=12, seed=11)
    vocab = [f"w{i}" for i in range(30)]
    rng = np.random.default_rng(1)
    features = [rng.normal(size=12) for _ in range(20)]
    labels = [vocab[int(rng.integers(0, 30))] for _ in range(20)]
    acc = topk_accuracy(features, labels, vocab, provider, ks=[1, 2, 5, 10, 30])
    values = [acc[k] for k in sorted(acc)]
    assert values == sorted(values)


def test_topk_rejects_bad_inputs():
    provider = make_mock()
    with pytest.raises(ValueError):
        topk_accuracy([np.ones(8)], ["missing"], ["other"], provider, ks=[1])
    with pytest.raises(ValueError):
        topk_accuracy([np.ones(8)], ["other"], ["other"], provider, ks=[0])


# ----------------------------------------------------------------------- AUC


def test_auc_constant_curves():
    assert auc_topk({1: 1.0, 10: 1.0}, 10) == pytest.approx(100.0, abs=1e-9)
    assert auc_topk({1: 0.5, 10: 0.5}, 10) == pytest.approx(50.0, abs=1e-9)


def test_auc_two_point_line_is_fifty():
    # trapezoid by hand: (0 + 1)/2 over the whole width
    assert auc_topk({1: 0.0, 100: 1.0}, 100) == pytest.approx(50.0, abs=1e-12)


def test_auc_constant_extension_at_ends():
    # curve only defined on [5, 10]; constant extension left of 5 and right of 10
    value = auc_topk({5: 0.5, 10: 1.0}, 20)
    # segments: [1,5] at 0.5 -> 2.0; [5,10] trapezoid -> 3.75; [10,20] at 1.0 -> 10.0
    assert value == pytest.approx((2.0 + 3.75 + 10.0) / 19.0 * 100.0, abs=1e-12)


def test_auc_dominance_monotonicity():
    rng = np.random.default_rng(5)
    ks = [1, 2, 5, 10, 25]
    for _ in range(100):
        low = {k: float(rng.uniform(0, 1)) for k in ks}
        high = {k: min(1.0, low[k] + float(rng.uniform(0, 0.5))) for k in ks}
        assert auc_topk(high, 25) >= auc_topk(low, 25) - 1e-12


def test_auc_rejects_bad_curves():
    with pytest.raises(ValueError):
        auc_topk({}, 10)
    with pytest.raises(ValueError):
        auc_topk({1: 0.5, 20: 0.6}, 10)


def test_retrieval_report_format():
    text = retrieval_report({1: 1.0, 5: 0.5}, 75.0, 13)
    assert "Acc_1: 100.00" in text
    assert "Acc_5: 50.00" in text
    assert "AUC: 75.00" in text
    assert "#objects: 13" in text
