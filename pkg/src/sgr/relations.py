"""Pairwise relation features: extraction per frame, assignment to the graph.

Per frame, the visual encoder runs on an inpainted crop of each admitted
detection pair; the resulting features are keyed by ordered detection-index
pairs. After object fusion has refreshed the frame-local object ids on the
graph, each unordered node pair whose ids key an observation folds exactly
one observation into its relation edge, so an edge's update count equals
the number of frames in which the pair was matched.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import DetectionSet, FrameRecord, save_rgb, load_rgb
from .errors import ProviderError
from .graph import LAYER_OBJECT, SceneGraph
from .imaging import pair_crop_inpainted
from .voxel import SemanticVoxelGrid

logger = logging.getLogger(__name__)


@dataclass
class PairObservation:
    feature: np.ndarray  # relation-dim encoding of the inpainted pair crop
    pair_crop: np.ndarray | None = None


@dataclass
class RelationObservations:
    """Map from ordered frame-local detection pair (i, j), i != j."""

    entries: dict[tuple[int, int], PairObservation] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def lookup(self, id_a: int, id_b: int) -> PairObservation | None:
        """Observation for an unordered id pair, preferring (min, max) order."""
        lo, hi = (id_a, id_b) if id_a < id_b else (id_b, id_a)
        obs = self.entries.get((lo, hi))
        if obs is None:
            obs = self.entries.get((hi, lo))
        return obs


def _box_centroid(box) -> np.ndarray:
    x0, y0, x1, y1 = box
    return np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])


def extract_pair_features(
    frame: FrameRecord,
    detections: DetectionSet,
    palette: dict[int, tuple[int, int, int]],
    encoder,
    *,
    max_pairs_per_frame: int = 20,
    max_pair_centroid_px: float | None = None,
    keep_crops: bool = True,
) -> RelationObservations:
    """Encode inpainted pair crops for the closest detection pairs.

    Ordered pairs are admitted sorted by (box centroid distance, i, j) up to
    ``max_pairs_per_frame``; pairs farther apart than
    ``max_pair_centroid_px`` (default: the image diagonal, i.e. no gate) are
    dropped. Encoder failures skip the pair with a warning.
    """
    observations = RelationObservations()
    n = len(detections)
    if n < 2:
        return observations
    if max_pair_centroid_px is None:
        h, w = frame.rgb.shape[:2]
        max_pair_centroid_px = float(np.hypot(h, w))
    centroids = [_box_centroid(b) for b in detections.boxes]
    ordered = []
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            dist = float(np.linalg.norm(centroids[i] - centroids[j]))
            if dist <= max_pair_centroid_px:
                ordered.append((dist, i, j))
    ordered.sort()
    for dist, i, j in ordered[:max_pairs_per_frame]:
        crop = pair_crop_inpainted(
            frame.rgb,
            detections.boxes[i],
            detections.boxes[j],
            detections.labels[i],
            detections.labels[j],
            palette,
        )
        try:
            feature = encoder.visual_encode(crop)
        except ProviderError as exc:
            logger.warning("pair (%d, %d) skipped: %s", i, j, exc)
            continue
        observations.entries[(i, j)] = PairObservation(
            feature=np.asarray(feature, dtype=np.float64),
            pair_crop=crop if keep_crops else None,
        )
    return observations


def assign_relations(
    graph: SceneGraph,
    grid: SemanticVoxelGrid,
    observations: RelationObservations,
    crop_store: "PairCropStore | None" = None,
) -> int:
    """Fold this frame's pair observations into relation edges.

    Only nodes observed this cycle carry an object_id; each unordered node
    pair folds at most one observation, so co-observing a pair in a frame
    increments its edge count by exactly one. Finishes by clearing the
    grid's transient relation ids. Returns the number of edges touched.
    """
    carriers = [
        (nid, node.object_id)
        for nid, node in sorted(graph.nodes(LAYER_OBJECT).items())
        if node.object_id is not None
    ]
    touched = 0
    for a_pos in range(len(carriers)):
        for b_pos in range(a_pos + 1, len(carriers)):
            nid_a, id_a = carriers[a_pos]
            nid_b, id_b = carriers[b_pos]
            obs = observations.lookup(id_a, id_b)
            if obs is None:
                continue
            edge = graph.upsert_relation(nid_a, nid_b, obs.feature)
            touched += 1
            if crop_store is not None and obs.pair_crop is not None:
                crop_store.remember(edge.endpoints, obs.pair_crop, edge.update_count)
    grid.strip_relation_ids()
    return touched


class PairCropStore:
    """Keeps the most recent inpainted crop per relation edge.

    Needed when the describing model only accepts images: the stored
    encoder feature cannot be replayed, so the latest crop is persisted
    under ``pair_crops/<a>-<b>_<count>.png`` next to the graph.
    """

    def __init__(self):
        self._crops: dict[tuple[int, int], tuple[np.ndarray, int]] = {}

    def remember(self, endpoints: tuple[int, int], crop: np.ndarray, count: int) -> None:
        self._crops[tuple(endpoints)] = (crop, count)

    def rekey(self, old: tuple[int, int], new: tuple[int, int]) -> None:
        entry = self._crops.pop(tuple(old), None)
        if entry is not None and tuple(new) not in self._crops:
            self._crops[tuple(new)] = entry

    def rekey_node(self, absorbed: int, survivor: int) -> None:
        """Re-key every crop touching ``absorbed`` onto ``survivor``."""
        for key in [k for k in self._crops if absorbed in k]:
            other = key[0] if key[1] == absorbed else key[1]
            if other == survivor:
                del self._crops[key]
                continue
            self.rekey(key, (min(survivor, other), max(survivor, other)))

    def get(self, endpoints: tuple[int, int]) -> np.ndarray | None:
        entry = self._crops.get(tuple(endpoints))
        return None if entry is None else entry[0]

    def save(self, directory: Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = {}
        for (a, b), (crop, count) in sorted(self._crops.items()):
            name = f"{a}-{b}_{count}.png"
            save_rgb(directory / name, crop)
            index[f"{a}-{b}"] = name
        (directory / "index.json").write_text(
            json.dumps(index, sort_keys=True, indent=1), encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: Path) -> "PairCropStore":
        store = cls()
        directory = Path(directory)
        index_path = directory / "index.json"
        if not index_path.is_file():
            return store
        index = json.loads(index_path.read_text(encoding="utf-8"))
        for key, name in index.items():
            a, b = (int(v) for v in key.split("-"))
            count = int(Path(name).stem.split("_")[-1])
            store._crops[(a, b)] = (load_rgb(directory / name), count)
        return store
