"""Similarity search over the graph and the retrieval evaluation metrics.

Search always goes through embeddings, never through the semantic labels
stored on nodes, so detector misclassifications cannot poison queries.
Stored features are unnormalized means; cosine normalizes on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import LAYER_OBJECT, LAYER_PLACE, LAYER_ROOM, SceneGraph


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"embedding dims differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class Match:
    node: int
    similarity: float
    query: str


def _room_of_object(graph: SceneGraph, object_id: int) -> int | None:
    place = graph.parent_of(object_id)
    if place is None or place not in graph.nodes(LAYER_PLACE):
        return None
    return graph.parent_of(place)


def find_objects(
    graph: SceneGraph,
    names: list[str],
    embedder,
    threshold: float,
    *,
    template: str = "{}",
    room_ids: list[int] | None = None,
) -> dict[str, list[Match]]:
    """Objects whose feature similarity to each queried name exceeds the threshold.

    Results are sorted by similarity descending, ties by node id. Objects
    without a fused feature are skipped. ``room_ids`` restricts candidates
    to objects whose place parent lies in one of those rooms.
    """
    if not names:
        raise ValueError("find_objects needs at least one name")
    candidates = []
    for nid, node in sorted(graph.nodes(LAYER_OBJECT).items()):
        if node.feature is None:
            continue
        if room_ids is not None and _room_of_object(graph, nid) not in room_ids:
            continue
        candidates.append((nid, node.feature))
    results: dict[str, list[Match]] = {}
    for name in names:
        query = embedder.embed_text(template.format(name))
        matches = [
            Match(node=nid, similarity=cosine(query, feature), query=name)
            for nid, feature in candidates
        ]
        matches = [m for m in matches if m.similarity > threshold]
        matches.sort(key=lambda m: (-m.similarity, m.node))
        results[name] = matches
    return results


def find_rooms(
    graph: SceneGraph,
    names: list[str],
    embedder,
    threshold: float,
    *,
    template: str = "{}",
) -> list[Match]:
    """Rooms whose mean similarity over (cluster, name) pairs exceeds the threshold.

    Every room with feature clusters contributes |clusters| * |names|
    cosine values; rooms without clusters are excluded, not an error.
    """
    if not names:
        raise ValueError("find_rooms needs at least one name")
    queries = [embedder.embed_text(template.format(name)) for name in names]
    matches = []
    for rid, room in sorted(graph.nodes(LAYER_ROOM).items()):
        if not room.feature_clusters:
            continue
        sims = [cosine(q, c) for c in room.feature_clusters for q in queries]
        mean = float(np.mean(sims))
        if mean > threshold:
            matches.append(Match(node=rid, similarity=mean, query="|".join(names)))
    matches.sort(key=lambda m: (-m.similarity, m.node))
    return matches


def filter_background(
    graph: SceneGraph,
    background_names: list[str],
    embedder,
    threshold: float,
    *,
    template: str = "{}",
) -> list[int]:
    """Remove objects that look like background categories; returns removed ids."""
    if not background_names:
        return []
    queries = [embedder.embed_text(template.format(name)) for name in background_names]
    removed = []
    for nid, node in sorted(graph.nodes(LAYER_OBJECT).items()):
        if node.feature is None:
            continue
        best = max(cosine(q, node.feature) for q in queries)
        if best > threshold:
            removed.append(nid)
    for nid in removed:
        graph.remove_node(nid)
    return removed


# -------------------------------------------------------------------- metrics

DEFAULT_K_GRID = (5, 10, 25, 100, 250, 500)


def topk_accuracy(
    object_features,
    true_labels: list[str],
    label_vocabulary: list[str],
    embedder,
    ks=DEFAULT_K_GRID,
    *,
    template: str = "{}",
) -> dict[int, float]:
    """Fraction of objects whose true label ranks in the top k by similarity.

    Returned accuracies are fractions in [0, 1]. Vocabulary order breaks
    similarity ties, keeping rankings reproducible.
    """
    if len(object_features) != len(true_labels):
        raise ValueError("one true label per object feature is required")
    if any(k < 1 for k in ks):
        raise ValueError(f"all k must be >= 1, got {sorted(ks)}")
    vocab_index = {name: i for i, name in enumerate(label_vocabulary)}
    missing = sorted(set(true_labels) - set(vocab_index))
    if missing:
        raise ValueError(f"true labels missing from vocabulary: {missing}")
    vocab_vectors = np.stack([embedder.embed_text(template.format(n)) for n in label_vocabulary])
    ranks = []
    for feature in object_features:
        sims = np.array([cosine(feature, v) for v in vocab_vectors])
        order = np.argsort(-sims, kind="stable")  # stable: ties keep vocabulary order
        ranks.append(order)
    accuracies = {}
    for k in sorted(set(int(k) for k in ks)):
        hits = sum(
            1
            for order, label in zip(ranks, true_labels)
            if vocab_index[label] in order[:k]
        )
        accuracies[k] = hits / len(true_labels) if true_labels else 0.0
    return accuracies


def auc_topk(acc_curve: dict[int, float], k_max: int) -> float:
    """Normalized area (as a percentage) under the accuracy-vs-k curve.

    Trapezoidal rule over k in [1, k_max] with linear interpolation between
    the provided points and constant extension beyond them, normalized by
    the integration width so a constant curve of 1 scores exactly 100.
    """
    if not acc_curve:
        raise ValueError("accuracy curve is empty")
    points = sorted((int(k), float(v)) for k, v in acc_curve.items())
    if points[0][0] < 1:
        raise ValueError("curve contains k < 1")
    if points[-1][0] > k_max:
        raise ValueError(f"curve contains k beyond k_max={k_max}")
    xs = [k for k, _ in points]
    ys = [v for _, v in points]
    if xs[0] > 1:
        xs.insert(0, 1)
        ys.insert(0, ys[0])
    if xs[-1] < k_max:
        xs.append(k_max)
        ys.append(ys[-1])
    if k_max == 1:
        return ys[0] * 100.0
    area = 0.0
    for i in range(len(xs) - 1):
        area += (ys[i] + ys[i + 1]) / 2.0 * (xs[i + 1] - xs[i])
    return area / (k_max - 1) * 100.0


def retrieval_report(
    accuracies: dict[int, float], auc: float, object_count: int
) -> str:
    """Plain-text evaluation summary: per-k accuracy, AUC, object count."""
    lines = ["retrieval evaluation", "--------------------"]
    for k in sorted(accuracies):
        lines.append(f"Acc_{k}: {accuracies[k] * 100.0:.2f}")
    lines.append(f"AUC: {auc:.2f}")
    lines.append(f"#objects: {object_count}")
    return "\n".join(lines) + "\n"
