"""Room appearance features: pose-tagged frame embeddings clustered per room.

Full-frame embeddings vary strongly with viewpoint, so each room keeps a
small set of cluster centroids rather than a single mean. Assignment is
re-run from scratch over the whole store whenever rooms are re-detected,
because room boundaries shift between detections.
"""

from __future__ import annotations

from dataclasses import dataclass

import logging

import numpy as np

from .datasets import FrameRecord, Pose
from .errors import ProviderError
from .graph import LAYER_ROOM, SceneGraph
from .voxel import SemanticVoxelGrid

logger = logging.getLogger(__name__)


@dataclass
class PoseEmbedding:
    pose: Pose
    embedding: np.ndarray
    timestamp: float


class PoseEmbeddingStore:
    """Append-only, time-ordered record of full-frame embeddings."""

    def __init__(self):
        self.entries: list[PoseEmbedding] = []

    def __len__(self) -> int:
        return len(self.entries)

    def append(self, pose: Pose, embedding, timestamp: float) -> None:
        if self.entries and timestamp < self.entries[-1].timestamp:
            raise ValueError(
                f"pose embeddings must arrive in time order "
                f"({timestamp} < {self.entries[-1].timestamp})"
            )
        self.entries.append(
            PoseEmbedding(pose=pose, embedding=np.asarray(embedding, dtype=np.float64), timestamp=timestamp)
        )


def record_pose_embedding(
    store: PoseEmbeddingStore, pose: Pose, frame: FrameRecord, embedder
) -> None:
    """Embed the full RGB frame and append it; provider failures skip the entry."""
    try:
        embedding = embedder.embed_image(frame.rgb)
    except ProviderError as exc:
        logger.warning("frame embedding skipped at t=%s: %s", frame.timestamp, exc)
        return
    store.append(pose, embedding, frame.timestamp)


def kmeans(
    points,
    k: int,
    seed: int = 0,
    max_iter: int = 100,
    tol: float = 1e-6,
    return_trace: bool = False,
):
    """Lloyd's algorithm with k-means++ seeding; deterministic for a fixed seed.

    Converges when no centroid moves more than ``tol``; an emptied cluster
    is re-seeded on the point currently farthest from its assigned centroid.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) == 0:
        raise ValueError("kmeans needs a nonempty list of equal-dimension points")
    if k <= 0:
        raise ValueError(f"k must be positive, got {k}")
    if len(pts) < k:
        raise ValueError(f"kmeans needs at least k={k} points, got {len(pts)}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, pts.shape[1]))
    first = int(rng.integers(len(pts)))
    centroids[0] = pts[first]
    min_d2 = np.sum((pts - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = float(min_d2.sum())
        if total <= 0.0:  # all remaining points coincide with a centroid
            choice = int(np.argmax(min_d2))
        else:
            choice = int(rng.choice(len(pts), p=min_d2 / total))
        centroids[i] = pts[choice]
        min_d2 = np.minimum(min_d2, np.sum((pts - centroids[i]) ** 2, axis=1))

    trace: list[float] = []
    for _ in range(max_iter):
        d2 = np.sum((pts[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        assignment = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(len(pts)), assignment].sum()))
        new_centroids = centroids.copy()
        for i in range(k):
            members = pts[assignment == i]
            if len(members):
                new_centroids[i] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(d2[np.arange(len(pts)), assignment]))
                new_centroids[i] = pts[farthest]
        movement = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if movement < tol:
            break
    if return_trace:
        return centroids, trace
    return centroids


def assign_room_features(
    graph: SceneGraph,
    store: PoseEmbeddingStore,
    k: int,
    grid: SemanticVoxelGrid,
    seed: int = 0,
) -> None:
    """Route every stored embedding to the room containing its pose, then cluster.

    Entries whose pose projects outside every room extent are discarded.
    Rooms with fewer than ``k`` samples keep the samples themselves as
    clusters; rooms with none get an empty cluster list. Existing clusters
    are replaced wholesale.
    """
    room_ids = graph.node_ids(LAYER_ROOM)
    samples: dict[int, list[np.ndarray]] = {rid: [] for rid in room_ids}
    for entry in store.entries:
        cell = grid.cell_2d(entry.pose.position)
        for rid in room_ids:
            if graph.nodes(LAYER_ROOM)[rid].contains_cell(cell):
                samples[rid].append(entry.embedding)
                break
    for rid in room_ids:
        room = graph.nodes(LAYER_ROOM)[rid]
        collected = samples[rid]
        if not collected:
            room.feature_clusters = []
        elif len(collected) < k:
            room.feature_clusters = [np.asarray(c, dtype=np.float64).copy() for c in collected]
        else:
            centroids = kmeans(collected, k, seed=seed)
            room.feature_clusters = [centroids[i].copy() for i in range(k)]
