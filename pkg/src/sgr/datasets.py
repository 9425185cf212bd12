"""Replay dataset loading and writing.

On-disk layout::

    <dataset>/
      manifest.json            name, frame_count, embedding_dim, palette, frame list
      frames/NNNNNN.json       pose, image paths, optional detections (RLE masks)
      images/NNNNNN_rgb.png    8-bit RGB
      images/NNNNNN_depth.png  16-bit grayscale, millimeters, 0 = invalid

Frames replay in timestamp order; detections may be precomputed here or
requested from a live detector provider by the caller.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import DatasetError
from .imaging import rle_decode, rle_encode

QUAT_NORM_TOL = 1e-6
DEPTH_INVALID = 0.0  # meters; back-projection skips these pixels


@dataclass(frozen=True)
class Pose:
    """Position plus unit quaternion (w, x, y, z)."""

    position: np.ndarray
    orientation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "orientation", np.asarray(self.orientation, dtype=np.float64))
        if self.position.shape != (3,) or self.orientation.shape != (4,):
            raise DatasetError(
                f"pose needs 3-vector position and 4-vector quaternion, got "
                f"{self.position.shape} / {self.orientation.shape}"
            )
        norm = float(np.linalg.norm(self.orientation))
        if abs(norm - 1.0) > QUAT_NORM_TOL:
            raise DatasetError(f"quaternion norm {norm} deviates from 1 by more than {QUAT_NORM_TOL}")

    def rotation_matrix(self) -> np.ndarray:
        w, x, y, z = self.orientation
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        for name in ("fx", "fy", "cx", "cy"):
            if getattr(self, name) <= 0:
                raise DatasetError(f"intrinsic {name} must be positive")


@dataclass
class FrameRecord:
    timestamp: float
    pose: Pose
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    intrinsics: Intrinsics

    def __post_init__(self):
        if self.rgb.shape[:2] != self.depth.shape:
            raise DatasetError(
                f"rgb {self.rgb.shape[:2]} and depth {self.depth.shape} sizes differ"
            )


@dataclass
class DetectionSet:
    """Per-frame 2D detections: boxes, decoded masks, labels, names, confidences."""

    boxes: list[tuple[int, int, int, int]]
    masks: list[np.ndarray]
    labels: list[int]
    label_names: list[str]
    confidences: list[float] = field(default_factory=list)

    def __post_init__(self):
        if not self.confidences:
            self.confidences = [1.0] * len(self.boxes)

    def __len__(self) -> int:
        return len(self.boxes)

    def validate(self, image_shape: tuple[int, int]) -> None:
        h, w = image_shape
        lengths = {
            len(self.boxes),
            len(self.masks),
            len(self.labels),
            len(self.label_names),
            len(self.confidences),
        }
        if len(lengths) > 1:
            raise DatasetError(f"detection list lengths differ: {lengths}")
        for k, (box, mask) in enumerate(zip(self.boxes, self.masks)):
            x0, y0, x1, y1 = box
            if not (0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h):
                raise DatasetError(f"detection {k}: box {box} outside {w}x{h} image")
            if mask.shape != (h, w):
                raise DatasetError(f"detection {k}: mask shape {mask.shape} != image {h}x{w}")
            ys, xs = np.nonzero(mask)
            if len(ys) == 0:
                raise DatasetError(f"detection {k}: mask is empty")
            if ys.min() < y0 or ys.max() >= y1 or xs.min() < x0 or xs.max() >= x1:
                raise DatasetError(f"detection {k}: mask extends outside its box")


@dataclass
class DatasetManifest:
    name: str
    frame_count: int
    embedding_dim: int
    label_palette: dict[int, tuple[int, int, int]]
    label_names: dict[int, str]
    frames: list[str]

    def validate(self) -> None:
        colors = list(self.label_palette.values())
        if len(set(colors)) != len(colors):
            raise DatasetError("label palette colors must be pairwise distinct")
        if self.frame_count != len(self.frames):
            raise DatasetError(
                f"manifest frame_count {self.frame_count} != {len(self.frames)} listed frames"
            )
        if self.embedding_dim < 1:
            raise DatasetError("embedding_dim must be >= 1")


# ------------------------------------------------------------------- PNG I/O


def save_rgb(path: Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path)


def load_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=np.uint8)


def save_depth(path: Path, depth_m: np.ndarray) -> None:
    mm = np.round(np.asarray(depth_m, dtype=np.float64) * 1000.0).astype(np.uint16)
    Image.fromarray(mm).save(path)  # uint16 maps to 16-bit grayscale PNG


def load_depth(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        mm = np.asarray(img, dtype=np.float64)
    return (mm / 1000.0).astype(np.float32)


# ------------------------------------------------------------------- loading


def load_manifest(dataset_dir: Path) -> DatasetManifest:
    path = Path(dataset_dir) / "manifest.json"
    if not path.is_file():
        raise DatasetError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
    try:
        manifest = DatasetManifest(
            name=doc["name"],
            frame_count=int(doc["frame_count"]),
            embedding_dim=int(doc["embedding_dim"]),
            label_palette={int(k): tuple(v) for k, v in doc["label_palette"].items()},
            label_names={int(k): str(v) for k, v in doc["label_names"].items()},
            frames=list(doc["frames"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"manifest schema violation: {exc!r}") from exc
    manifest.validate()
    return manifest


def _detections_from_record(doc: dict, image_shape: tuple[int, int]) -> DetectionSet:
    masks = [rle_decode(rle, image_shape) for rle in doc["masks_rle"]]
    det = DetectionSet(
        boxes=[tuple(int(v) for v in b) for b in doc["boxes"]],
        masks=masks,
        labels=[int(v) for v in doc["labels"]],
        label_names=[str(v) for v in doc["label_names"]],
        confidences=[float(v) for v in doc.get("confidences", [])],
    )
    det.validate(image_shape)
    return det


def load_frame(
    dataset_dir: Path, relative_path: str
) -> tuple[FrameRecord, DetectionSet | None]:
    dataset_dir = Path(dataset_dir)
    path = dataset_dir / relative_path
    if not path.is_file():
        raise DatasetError(f"frame record not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"frame record {relative_path} is not valid JSON: {exc}") from exc
    try:
        pose = Pose(doc["pose"]["position"], doc["pose"]["orientation_wxyz"])
        intr = Intrinsics(**{k: float(doc["intrinsics"][k]) for k in ("fx", "fy", "cx", "cy")})
        rgb = load_rgb(dataset_dir / doc["rgb"])
        depth = load_depth(dataset_dir / doc["depth"])
        frame = FrameRecord(
            timestamp=float(doc["timestamp"]),
            pose=pose,
            rgb=rgb,
            depth=depth,
            intrinsics=intr,
        )
        detections = None
        if doc.get("detections") is not None:
            detections = _detections_from_record(doc["detections"], rgb.shape[:2])
    except DatasetError:
        raise
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise DatasetError(f"frame record {relative_path} is malformed: {exc!r}") from exc
    return frame, detections


def load_dataset(dataset_dir: Path) -> Iterator[tuple[FrameRecord, DetectionSet | None]]:
    """Stream frames in timestamp order, validating as they are read."""
    manifest = load_manifest(dataset_dir)
    previous_ts = -math.inf
    for relative in manifest.frames:
        frame, detections = load_frame(dataset_dir, relative)
        if frame.timestamp <= previous_ts:
            raise DatasetError(
                f"frame {relative}: timestamp {frame.timestamp} not after {previous_ts}"
            )
        previous_ts = frame.timestamp
        yield frame, detections


# ------------------------------------------------------------------- writing


def write_dataset(
    dataset_dir: Path,
    name: str,
    embedding_dim: int,
    label_palette: dict[int, tuple[int, int, int]],
    label_names: dict[int, str],
    frames: list[tuple[FrameRecord, DetectionSet | None]],
) -> Path:
    """Write a complete replay dataset; returns the dataset directory."""
    dataset_dir = Path(dataset_dir)
    (dataset_dir / "frames").mkdir(parents=True, exist_ok=True)
    (dataset_dir / "images").mkdir(parents=True, exist_ok=True)
    frame_paths = []
    for index, (frame, detections) in enumerate(frames):
        stem = f"{index:06d}"
        rgb_rel = f"images/{stem}_rgb.png"
        depth_rel = f"images/{stem}_depth.png"
        save_rgb(dataset_dir / rgb_rel, frame.rgb)
        save_depth(dataset_dir / depth_rel, frame.depth)
        record = {
            "timestamp": frame.timestamp,
            "pose": {
                "position": [float(v) for v in frame.pose.position],
                "orientation_wxyz": [float(v) for v in frame.pose.orientation],
            },
            "rgb": rgb_rel,
            "depth": depth_rel,
            "intrinsics": {
                "fx": frame.intrinsics.fx,
                "fy": frame.intrinsics.fy,
                "cx": frame.intrinsics.cx,
                "cy": frame.intrinsics.cy,
            },
            "detections": None,
        }
        if detections is not None:
            record["detections"] = {
                "boxes": [list(b) for b in detections.boxes],
                "masks_rle": [rle_encode(m) for m in detections.masks],
                "labels": detections.labels,
                "label_names": detections.label_names,
                "confidences": detections.confidences,
            }
        frame_rel = f"frames/{stem}.json"
        (dataset_dir / frame_rel).write_text(
            json.dumps(record, sort_keys=True, indent=1), encoding="utf-8"
        )
        frame_paths.append(frame_rel)
    manifest = {
        "name": name,
        "frame_count": len(frames),
        "embedding_dim": embedding_dim,
        "label_palette": {str(k): list(v) for k, v in sorted(label_palette.items())},
        "label_names": {str(k): v for k, v in sorted(label_names.items())},
        "frames": frame_paths,
    }
    (dataset_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8"
    )
    return dataset_dir
