"""Per-frame construction engine.

Each frame runs: feature extraction (per-detection fused embeddings, a
pose-tagged full-frame embedding, pair relation features), grid integration
and object fusion, place extraction, and relation assignment. Room
detection plus room-feature clustering run every ``room_cycle_stride``
frames and once more at stream end.

The engine owns the graph; readers should take ``builder.graph.snapshot()``
at cycle boundaries.
"""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .datasets import DatasetManifest, DetectionSet, FrameRecord, load_dataset, load_manifest
from .errors import ProviderError
from .fusion import FusionWeights, combine_object_embedding
from .graph import LAYER_BUILDING, LAYER_OBJECT, LAYER_PLACE, LAYER_ROOM, SceneGraph
from .imaging import crop_bbox, crop_masked
from .providers import build_provider
from .reconstruction import cluster_objects, detect_rooms, fuse_or_create_objects, update_places
from .relations import PairCropStore, assign_relations, extract_pair_features
from .room_features import PoseEmbeddingStore, assign_room_features, record_pose_embedding
from .voxel import SemanticVoxelGrid


@dataclass
class StageTimer:
    samples: dict[str, list[float]]

    def __init__(self):
        self.samples = defaultdict(list)

    def time(self, stage: str):
        timer = self

        class _Span:
            def __enter__(self):
                self.start = time.perf_counter()
                return self

            def __exit__(self, *exc):
                timer.samples[stage].append((time.perf_counter() - self.start) * 1000.0)
                return False

        return _Span()

    def report(self) -> str:
        lines = ["stage timings (ms, mean +/- std over frames)", "---------------------------------------------"]
        for stage in sorted(self.samples):
            arr = np.asarray(self.samples[stage])
            lines.append(f"{stage:18s} {arr.mean():8.2f} +/- {arr.std():.2f}  (n={len(arr)})")
        return "\n".join(lines) + "\n"


class SceneGraphBuilder:
    """Incrementally builds the graph from replayed frames."""

    def __init__(self, config: PipelineConfig, provider, palette: dict[int, tuple[int, int, int]]):
        self.config = config
        self.provider = provider
        self.palette = dict(palette)
        self.graph = SceneGraph()
        self.grid = SemanticVoxelGrid(config.reconstruction.voxel_size)
        self.pose_store = PoseEmbeddingStore()
        self.crop_store = PairCropStore()
        self.weights = FusionWeights(
            config.fusion.alpha_mask, config.fusion.alpha_bbox, config.fusion.alpha_label
        )
        self.frame_index = 0
        self.timer = StageTimer()

    # ------------------------------------------------------------ one frame

    def _filter_detections(self, detections: DetectionSet | None) -> DetectionSet | None:
        if detections is None:
            return None
        threshold = self.config.ingest.min_detection_confidence
        if threshold <= 0.0:
            return detections
        keep = [k for k, c in enumerate(detections.confidences) if c >= threshold]
        return DetectionSet(
            boxes=[detections.boxes[k] for k in keep],
            masks=[detections.masks[k] for k in keep],
            labels=[detections.labels[k] for k in keep],
            label_names=[detections.label_names[k] for k in keep],
            confidences=[detections.confidences[k] for k in keep],
        )

    def _detection_features(self, frame: FrameRecord, detections: DetectionSet) -> list[np.ndarray]:
        features = []
        for k in range(len(detections)):
            masked = crop_masked(frame.rgb, detections.masks[k])
            boxed = crop_bbox(frame.rgb, detections.boxes[k])
            features.append(
                combine_object_embedding(
                    self.provider.embed_image(masked),
                    self.provider.embed_image(boxed),
                    self.provider.embed_text(detections.label_names[k]),
                    self.weights,
                )
            )
        return features

    def process_frame(self, frame: FrameRecord, detections: DetectionSet | None) -> None:
        detections = self._filter_detections(detections)
        if detections is not None:
            detections.validate(frame.rgb.shape[:2])

        features: list[np.ndarray] = []
        observations = None
        with self.timer.time("object_features"):
            if detections is not None and len(detections) > 0:
                features = self._detection_features(frame, detections)
        with self.timer.time("frame_embedding"):
            record_pose_embedding(self.pose_store, frame.pose, frame, self.provider)
        with self.timer.time("pair_features"):
            if detections is not None and len(detections) > 1:
                observations = extract_pair_features(
                    frame,
                    detections,
                    self.palette,
                    self.provider,
                    max_pairs_per_frame=self.config.relations.max_pairs_per_frame,
                    max_pair_centroid_px=self.config.relations.max_pair_centroid_px,
                    keep_crops=self.config.relations.keep_pair_crops,
                )

        with self.timer.time("integration"):
            self.grid.integrate_frame(frame.pose, frame, detections, features)
        with self.timer.time("clustering"):
            clusters = cluster_objects(self.grid, self.config.reconstruction.min_cluster_voxels)
        with self.timer.time("object_fusion"):
            stats = fuse_or_create_objects(
                self.graph, clusters, self.grid, merge_iou=self.config.reconstruction.merge_iou
            )
            for absorbed, survivor in stats.merges:
                self.crop_store.rekey_node(absorbed, survivor)
            self.grid.strip_feature_transients()

        with self.timer.time("places"):
            update_places(
                self.graph,
                self.grid,
                z_min=self.config.reconstruction.free_band_z_min,
                z_max=self.config.reconstruction.free_band_z_max,
                min_separation_m=self.config.reconstruction.place_min_sep,
                neighbor_k=self.config.reconstruction.place_neighbor_k,
            )

        with self.timer.time("relations"):
            if observations is not None:
                assign_relations(self.graph, self.grid, observations, self.crop_store)
            else:
                self.grid.strip_relation_ids()

        self.frame_index += 1
        if self.frame_index % self.config.reconstruction.room_cycle_stride == 0:
            with self.timer.time("rooms"):
                self.run_room_cycle()

    def run_room_cycle(self) -> None:
        detect_rooms(
            self.graph,
            self.grid,
            z_min=self.config.reconstruction.free_band_z_min,
            z_max=self.config.reconstruction.free_band_z_max,
            door_radius_m=self.config.reconstruction.door_radius,
        )
        assign_room_features(
            self.graph,
            self.pose_store,
            self.config.rooms.feature_clusters,
            self.grid,
            seed=self.config.seed,
        )

    def finalize(self) -> None:
        """Run the slow-cadence stage once more so the final graph is complete."""
        with self.timer.time("rooms"):
            self.run_room_cycle()

    # ------------------------------------------------------------- persistence

    def save(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        graph_path = out_dir / "graph.json"
        graph_path.write_bytes(self.graph.serialize())
        if self.config.relations.keep_pair_crops:
            self.crop_store.save(out_dir / "pair_crops")
        return graph_path

    def summary(self) -> str:
        counts = {name: len(self.graph.nodes(layer)) for layer, name in
                  ((LAYER_OBJECT, "objects"), (LAYER_PLACE, "places"),
                   (LAYER_ROOM, "rooms"), (LAYER_BUILDING, "buildings"))}
        lines = [
            f"frames processed: {self.frame_index}",
            f"objects: {counts['objects']}",
            f"places: {counts['places']}",
            f"rooms: {counts['rooms']}",
            f"buildings: {counts['buildings']}",
            f"relation edges: {len(self.graph.relation_edges)}",
            f"occupied voxels: {len(self.grid)}",
        ]
        return "\n".join(lines) + "\n"


def build_from_dataset(
    dataset_dir: Path, config: PipelineConfig, out_dir: Path | None = None
) -> SceneGraphBuilder:
    """Replay a dataset end to end; optionally persist graph and crops."""
    manifest = load_manifest(dataset_dir)
    provider = provider_for_dataset(config, manifest)
    if getattr(provider, "embedding_dim", manifest.embedding_dim) != manifest.embedding_dim:
        raise ProviderError(
            f"provider embedding dim {provider.embedding_dim} != dataset "
            f"embedding dim {manifest.embedding_dim}"
        )
    builder = SceneGraphBuilder(config, provider, manifest.label_palette)
    for frame, detections in load_dataset(dataset_dir):
        builder.process_frame(frame, detections)
    builder.finalize()
    if out_dir is not None:
        builder.save(out_dir)
    return builder


def provider_for_dataset(config: PipelineConfig, manifest: DatasetManifest):
    """Build the configured provider, wiring mock anchors from the manifest."""
    return build_provider(
        config.provider,
        palette=manifest.label_palette,
        color_labels=manifest.label_names,
    )
