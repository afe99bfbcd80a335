"""Box types, annotations, and the box arithmetic shared by every module.

Coordinates are continuous pixel values with corner-exclusive area
``(x2 - x1) * (y2 - y1)``; there is no +1 convention anywhere in the
package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

OCCLUSION_STATES = ("masked", "unmasked", "ignored")


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixel coordinates, x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"non-finite box coordinate: {self}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    def clip(self, width: float, height: float) -> "BoundingBox":
        """Clip to the image rectangle [0, width] x [0, height]."""
        return BoundingBox(
            max(0.0, self.x1), max(0.0, self.y1),
            min(float(width), self.x2), min(float(height), self.y2),
        )


@dataclass(frozen=True)
class Annotation:
    """A ground-truth face with its occlusion state.

    ``occlusion_region`` references the pixel region holding this face's
    occluder mask (the face box within the dataset's mask image); present
    only for masked faces.  Ignored annotations never count as positives
    or negatives during evaluation.
    """

    box: BoundingBox
    occlusion_state: str = "unmasked"
    category: str = "face"
    occlusion_region: Optional[BoundingBox] = None

    def __post_init__(self):
        if self.occlusion_state not in OCCLUSION_STATES:
            raise ValueError(f"unknown occlusion state {self.occlusion_state!r}")
        if self.occlusion_region is not None and self.occlusion_state != "masked":
            raise ValueError("occlusion_region only valid for masked annotations")


@dataclass(frozen=True)
class Detection:
    """A detector output: box plus confidence in [0, 1]."""

    box: BoundingBox
    score: float

    def __post_init__(self):
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score outside [0, 1]: {self.score}")


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection over union of two boxes; symmetric, in [0, 1]."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def enlarge_box(b: BoundingBox, factor: float) -> BoundingBox:
    """Scale width and height by ``factor`` about the box center."""
    if factor <= 0.0:
        raise ValueError(f"factor must be positive, got {factor}")
    cx, cy = b.center
    hw = b.width * factor / 2.0
    hh = b.height * factor / 2.0
    return BoundingBox(cx - hw, cy - hh, cx + hw, cy + hh)


def rect_to_square(b: BoundingBox, mode: str = "max") -> BoundingBox:
    """Center-preserving square conversion.

    ``mode="max"`` (default) uses side = max(w, h) so the face stays
    covered; ``mode="geometric"`` uses side = sqrt(w * h), preserving
    area, for sensitivity checks.
    """
    if mode == "max":
        side = max(b.width, b.height)
    elif mode == "geometric":
        side = math.sqrt(b.width * b.height)
    else:
        raise ValueError(f"unknown square mode {mode!r}")
    cx, cy = b.center
    h = side / 2.0
    return BoundingBox(cx - h, cy - h, cx + h, cy + h)


# ---------------------------------------------------------------------------
# Vectorized helpers on (N, 4) arrays of [x1, y1, x2, y2].
# ---------------------------------------------------------------------------

def boxes_array(boxes) -> np.ndarray:
    """Stack BoundingBox objects (or raw rows) into an (N, 4) float array."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=np.float64)
    rows = [b.as_array() if isinstance(b, BoundingBox) else np.asarray(b, dtype=np.float64)
            for b in boxes]
    return np.stack(rows, axis=0)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays, result (N, M)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0.0, None) * np.clip(iy, 0.0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.maximum(union, 1e-300), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, score-descending."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    suppressed = np.zeros(len(order), dtype=bool)
    ious = iou_matrix(boxes, boxes)
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed |= ious[i] > iou_threshold
    return np.array(keep, dtype=np.int64)


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Standard 4-parameter regression encoding (center offsets, log sizes)."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = (targets[:, 0] + targets[:, 2]) / 2.0
    ty = (targets[:, 1] + targets[:, 3]) / 2.0
    return np.stack([(tx - ax) / aw, (ty - ay) / ah,
                     np.log(tw / aw), np.log(th / ah)], axis=1)


def apply_deltas(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_deltas`."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(np.clip(deltas[:, 2], -10.0, 10.0))
    h = ah * np.exp(np.clip(deltas[:, 3], -10.0, 10.0))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)
