"""Feature fusion: weighted multi-crop combination and running averages.

Fused features are deliberately kept unnormalized so that every stored
vector stays the exact arithmetic mean of its observations; cosine
similarity normalizes on the fly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WEIGHT_SUM_TOL = 1e-9


@dataclass(frozen=True)
class FusionWeights:
    """Convex weights for the masked-crop, box-crop and label-text embeddings."""

    alpha_mask: float = 0.4
    alpha_bbox: float = 0.4
    alpha_label: float = 0.2

    def __post_init__(self):
        for name in ("alpha_mask", "alpha_bbox", "alpha_label"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name}={value} outside [0, 1]")
        total = self.alpha_mask + self.alpha_bbox + self.alpha_label
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(f"fusion weights sum to {total!r}, expected 1.0")


def _as_f64(vec) -> np.ndarray:
    arr = np.asarray(vec, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"expected 1-D embedding, got shape {arr.shape}")
    return arr


def combine_object_embedding(masked, boxed, label, weights: FusionWeights) -> np.ndarray:
    """Weighted sum of the three per-detection embeddings.

    Evaluated in delta form so three equal inputs return that input bit-exactly
    (the naive weighted sum drifts by an ulp even with weights summing to 1).
    """
    m, b, s = _as_f64(masked), _as_f64(boxed), _as_f64(label)
    if not (m.shape == b.shape == s.shape):
        raise ValueError(f"embedding dims differ: {m.shape}, {b.shape}, {s.shape}")
    return m + weights.alpha_bbox * (b - m) + weights.alpha_label * (s - m)


def running_average(old, count: int, new) -> tuple[np.ndarray, int]:
    """Fold one observation into a running mean.

    ``count`` is the number of observations already folded; ``count`` 0 (and
    ``old`` None) means no prior feature, so the result is ``new`` with
    count 1. Returns the updated mean and the incremented count.
    """
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    n = _as_f64(new)
    if count == 0 or old is None:
        return n.copy(), 1
    o = _as_f64(old)
    if o.shape != n.shape:
        raise ValueError(f"embedding dims differ: {o.shape} vs {n.shape}")
    return (count * o + n) / (count + 1), count + 1


def average_features(features) -> np.ndarray:
    """Componentwise mean of a nonempty list of equal-dimension embeddings."""
    if len(features) == 0:
        raise ValueError("cannot average an empty feature list")
    arrs = [_as_f64(f) for f in features]
    dim = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != dim:
            raise ValueError(f"embedding dims differ: {dim} vs {a.shape}")
    return np.mean(np.stack(arrs), axis=0)
