"""Semantic voxel grid: the reconstruction substrate.

Occupied voxels stand in for surface vertices; each carries a color, an
optional semantic label, and two per-cycle transient annotations: the index
of the detection whose feature applies to it and the frame-local relation
id. Feature annotations are cleared once object fusion has consumed them;
relation ids are cleared after relation assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .datasets import DetectionSet, FrameRecord, Pose


@dataclass
class VoxelData:
    color: tuple[int, int, int]
    label: int | None = None
    label_confidence: float = 0.0
    hit_count: int = 0
    transient_feature_index: int | None = None
    transient_relation_id: int | None = None


class SemanticVoxelGrid:
    """Sparse map from integer voxel index to per-voxel data."""

    def __init__(self, voxel_size: float):
        if voxel_size <= 0:
            raise ValueError(f"voxel_size must be positive, got {voxel_size}")
        self.voxel_size = float(voxel_size)
        self.cells: dict[tuple[int, int, int], VoxelData] = {}
        self.frame_features: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.cells)

    def voxel_index(self, point) -> tuple[int, int, int]:
        return (
            math.floor(point[0] / self.voxel_size),
            math.floor(point[1] / self.voxel_size),
            math.floor(point[2] / self.voxel_size),
        )

    def center(self, index: tuple[int, int, int]) -> np.ndarray:
        return (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    # -------------------------------------------------------------- integration

    def integrate_frame(
        self,
        pose: Pose,
        frame: FrameRecord,
        detections: DetectionSet | None,
        features: list[np.ndarray] | None,
    ) -> None:
        """Back-project every valid depth pixel into the grid.

        Pixels inside a detection mask stamp their voxel with the detection
        label and the transient feature/relation indices. When masks overlap
        on a pixel or voxel, the higher-confidence detection wins, ties to
        the lower detection index.
        """
        depth = np.asarray(frame.depth, dtype=np.float64)
        h, w = depth.shape
        intr = frame.intrinsics
        if detections is not None and features is not None and len(features) != len(detections):
            raise ValueError(
                f"{len(features)} features for {len(detections)} detections"
            )

        vs, us = np.nonzero(depth > 0)
        if len(vs) == 0:
            return
        d = depth[vs, us]
        x_cam = (us - intr.cx) * d / intr.fx
        y_cam = (vs - intr.cy) * d / intr.fy
        cam = np.stack([x_cam, y_cam, d], axis=1)
        world = cam @ pose.rotation_matrix().T + pose.position
        indices = np.floor(world / self.voxel_size).astype(np.int64)

        winner = None
        if detections is not None and len(detections) > 0:
            # per-pixel winning detection, resolved once for the frame
            winner = np.full((h, w), -1, dtype=np.int64)
            order = sorted(
                range(len(detections)),
                key=lambda k: (-detections.confidences[k], k),
            )
            for k in order:
                stamp = detections.masks[k] & (winner == -1)
                winner[stamp] = k

        rgb = frame.rgb
        claims: dict[tuple[int, int, int], tuple[float, int]] = {}
        for row in range(len(vs)):
            v, u = int(vs[row]), int(us[row])
            key = (int(indices[row, 0]), int(indices[row, 1]), int(indices[row, 2]))
            cell = self.cells.get(key)
            if cell is None:
                cell = VoxelData(color=(int(rgb[v, u, 0]), int(rgb[v, u, 1]), int(rgb[v, u, 2])))
                self.cells[key] = cell
            else:
                cell.color = (int(rgb[v, u, 0]), int(rgb[v, u, 1]), int(rgb[v, u, 2]))
            cell.hit_count += 1
            if winner is not None:
                k = int(winner[v, u])
                if k >= 0:
                    conf = float(detections.confidences[k])
                    previous = claims.get(key)
                    if previous is None or (conf, -k) > (previous[0], -previous[1]):
                        claims[key] = (conf, k)
        for key, (conf, k) in claims.items():
            cell = self.cells[key]
            cell.label = int(detections.labels[k])
            cell.label_confidence = conf
            cell.transient_feature_index = k
            cell.transient_relation_id = k
        if features is not None:
            self.frame_features = [np.asarray(f, dtype=np.float64) for f in features]

    # ---------------------------------------------------------------- cleanup

    def strip_feature_transients(self) -> None:
        for cell in self.cells.values():
            cell.transient_feature_index = None
        self.frame_features = None

    def strip_relation_ids(self) -> None:
        for cell in self.cells.values():
            cell.transient_relation_id = None

    def strip_transients(self) -> None:
        self.strip_feature_transients()
        self.strip_relation_ids()

    def transient_counts(self) -> tuple[int, int]:
        features = sum(1 for c in self.cells.values() if c.transient_feature_index is not None)
        relations = sum(1 for c in self.cells.values() if c.transient_relation_id is not None)
        return features, relations

    # ------------------------------------------------------------- 2D slices

    def occupancy_slab(
        self, z_min: float, z_max: float
    ) -> tuple[np.ndarray, tuple[int, int]] | None:
        """Free-space mask over the grid's 2D footprint.

        A 2D cell is blocked when any voxel in its column has its center
        inside [z_min, z_max]; the domain is the bounding rectangle of every
        occupied voxel regardless of height. Returns (free_mask, origin)
        with ``free_mask[iy - oy, ix - ox]``, or None for an empty grid.
        """
        if not self.cells:
            return None
        keys = np.array(list(self.cells.keys()), dtype=np.int64)
        x0, y0 = int(keys[:, 0].min()), int(keys[:, 1].min())
        x1, y1 = int(keys[:, 0].max()), int(keys[:, 1].max())
        free = np.ones((y1 - y0 + 1, x1 - x0 + 1), dtype=bool)
        centers_z = (keys[:, 2] + 0.5) * self.voxel_size
        in_band = (centers_z >= z_min) & (centers_z <= z_max)
        for ix, iy in keys[in_band][:, :2]:
            free[int(iy) - y0, int(ix) - x0] = False
        return free, (x0, y0)

    def cell_2d(self, point) -> tuple[int, int]:
        return (
            math.floor(point[0] / self.voxel_size),
            math.floor(point[1] / self.voxel_size),
        )

    # ----------------------------------------------------------------- debug

    def dump(self) -> str:
        """Deterministic text listing of occupied cells, for oracle comparison."""
        lines = []
        for key in sorted(self.cells):
            cell = self.cells[key]
            label = "-" if cell.label is None else str(cell.label)
            lines.append(
                f"{key[0]} {key[1]} {key[2]} "
                f"{cell.color[0]} {cell.color[1]} {cell.color[2]} {label} {cell.hit_count}"
            )
        return "\n".join(lines) + ("\n" if lines else "")
