"""2D image manipulation: crops, inpainted pair crops, masks, palette colors.

Images are ``uint8`` arrays of shape (H, W, 3); masks are boolean (H, W).
Boxes are half-open pixel rectangles ``(x0, y0, x1, y1)``.
"""

from __future__ import annotations

import numpy as np

DEFAULT_STROKE_PX = 3

# Fixed lookup table for turning palette colors into words a language model
# can use. Order breaks ties.
COLOR_NAMES: list[tuple[str, tuple[int, int, int]]] = [
    ("black", (0, 0, 0)),
    ("white", (255, 255, 255)),
    ("red", (255, 0, 0)),
    ("green", (0, 255, 0)),
    ("blue", (0, 0, 255)),
    ("yellow", (255, 255, 0)),
    ("cyan", (0, 255, 255)),
    ("magenta", (255, 0, 255)),
    ("orange", (255, 165, 0)),
    ("purple", (128, 0, 128)),
    ("brown", (139, 69, 19)),
    ("pink", (255, 192, 203)),
    ("gray", (128, 128, 128)),
    ("olive", (128, 128, 0)),
    ("teal", (0, 128, 128)),
    ("navy", (0, 0, 128)),
]


def _check_image(rgb: np.ndarray) -> np.ndarray:
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 (H, W, 3) image, got {arr.dtype} {arr.shape}")
    return arr


def _check_box(box, width: int, height: int) -> tuple[int, int, int, int]:
    x0, y0, x1, y1 = (int(v) for v in box)
    if not (0 <= x0 < x1 <= width and 0 <= y0 < y1 <= height):
        raise ValueError(f"box {box} invalid for {width}x{height} image")
    return x0, y0, x1, y1


def crop_masked(rgb: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Tight crop around the mask with everything outside the mask black."""
    rgb = _check_image(rgb)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != rgb.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match image {rgb.shape[:2]}")
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        raise ValueError("mask is empty")
    y0, y1 = int(ys.min()), int(ys.max()) + 1
    x0, x1 = int(xs.min()), int(xs.max()) + 1
    out = rgb[y0:y1, x0:x1].copy()
    out[~mask[y0:y1, x0:x1]] = 0
    return out


def crop_bbox(rgb: np.ndarray, box) -> np.ndarray:
    """Exact sub-image for a half-open pixel box."""
    rgb = _check_image(rgb)
    x0, y0, x1, y1 = _check_box(box, rgb.shape[1], rgb.shape[0])
    return rgb[y0:y1, x0:x1].copy()


def union_box(a, b) -> tuple[int, int, int, int]:
    return (
        min(int(a[0]), int(b[0])),
        min(int(a[1]), int(b[1])),
        max(int(a[2]), int(b[2])),
        max(int(a[3]), int(b[3])),
    )


def draw_box_outline(rgb: np.ndarray, box, color, stroke: int = DEFAULT_STROKE_PX) -> None:
    """Draw a rectangle outline in place; the stroke stays inside the box."""
    x0, y0, x1, y1 = _check_box(box, rgb.shape[1], rgb.shape[0])
    s = min(stroke, x1 - x0, y1 - y0)
    color = np.asarray(color, dtype=np.uint8)
    rgb[y0 : y0 + s, x0:x1] = color
    rgb[y1 - s : y1, x0:x1] = color
    rgb[y0:y1, x0 : x0 + s] = color
    rgb[y0:y1, x1 - s : x1] = color


def pair_crop_inpainted(
    rgb: np.ndarray,
    box_i,
    box_j,
    label_i: int,
    label_j: int,
    palette: dict[int, tuple[int, int, int]],
    stroke: int = DEFAULT_STROKE_PX,
) -> np.ndarray:
    """Crop of the union of two boxes with each box outlined in its label color.

    The outlines tell a vision-language model which two objects the prompt
    is about; filled rectangles would hide the object pixels, so only the
    outline is painted.
    """
    rgb = _check_image(rgb)
    for label in (label_i, label_j):
        if label not in palette:
            raise ValueError(f"palette has no color for label {label}")
    canvas = rgb.copy()
    draw_box_outline(canvas, box_i, palette[label_i], stroke)
    draw_box_outline(canvas, box_j, palette[label_j], stroke)
    return crop_bbox(canvas, union_box(box_i, box_j))


def label_color(
    label: int, palette: dict[int, tuple[int, int, int]]
) -> tuple[tuple[int, int, int], str]:
    """Palette color for a label plus its nearest human-readable color name."""
    if label not in palette:
        raise ValueError(f"palette has no color for label {label}")
    color = tuple(int(c) for c in palette[label])
    best_name, best_dist = None, None
    for name, ref in COLOR_NAMES:
        dist = sum((int(c) - int(r)) ** 2 for c, r in zip(color, ref))
        if best_dist is None or dist < best_dist:
            best_name, best_dist = name, dist
    return color, best_name


# ----------------------------------------------------------------------- RLE


def rle_encode(mask: np.ndarray) -> str:
    """Row-major run-length encoding, alternating counts starting with background."""
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return "0"
    boundaries = np.nonzero(np.diff(flat))[0] + 1
    edges = np.concatenate([[0], boundaries, [flat.size]])
    runs = np.diff(edges).tolist()
    if flat[0]:  # runs must start with a background count
        runs = [0] + runs
    return " ".join(str(int(r)) for r in runs)


def rle_decode(encoded: str, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`rle_encode`; validates the total pixel count."""
    runs = [int(tok) for tok in encoded.split()] if encoded.strip() else []
    total = sum(runs)
    expected = int(shape[0]) * int(shape[1])
    if total != expected:
        raise ValueError(f"run lengths sum to {total}, expected {expected} for shape {shape}")
    flat = np.zeros(expected, dtype=bool)
    pos, value = 0, False
    for run in runs:
        if run < 0:
            raise ValueError("negative run length")
        if value:
            flat[pos : pos + run] = True
        pos += run
        value = not value
    return flat.reshape(shape)
