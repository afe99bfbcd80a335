"""Image-level occlusion segmentation branch with bounding-box gating.

The branch is fully convolutional over the backbone feature map and
produces two-class logits (occluder vs everything else).  At both train
and inference time only pixels inside 1.3x-enlarged boxes count; the
rest of the map is noise and is dropped.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .geometry import BoundingBox, enlarge_box

GATE_FACTOR = 1.3


class SegmentationHead(nn.Module):
    """Three-conv fully convolutional head, 2 output classes."""

    def __init__(self, channels: int = 64):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(channels, channels // 2, 3, padding=1), nn.ELU(),
            nn.Conv2d(channels // 2, channels // 2, 3, padding=1), nn.ELU(),
            nn.Conv2d(channels // 2, 2, 3, padding=1),
        )

    def forward(self, featmap: torch.Tensor) -> torch.Tensor:
        """Per-pixel logits (2, H', W') for an (C, H', W') feature map."""
        if featmap.dim() == 3:
            return self.layers(featmap[None])[0]
        return self.layers(featmap)


def build_gate(boxes, map_size: tuple[int, int], stride: int,
               factor: float = GATE_FACTOR) -> np.ndarray:
    """Binary gate over the feature grid: union of enlarged boxes.

    A feature cell belongs to the gate when its center pixel lies inside
    at least one enlarged (and image-clipped) box.  An empty box list
    yields an all-zero gate.
    """
    if factor <= 0:
        raise ValueError(f"factor must be positive, got {factor}")
    h, w = map_size
    gate = np.zeros((h, w), dtype=np.float64)
    if len(boxes) == 0:
        return gate
    ys = (np.arange(h) + 0.5) * stride
    xs = (np.arange(w) + 0.5) * stride
    for b in boxes:
        if not isinstance(b, BoundingBox):
            b = BoundingBox(*np.asarray(b, dtype=np.float64))
        eb = enlarge_box(b, factor)
        inside_y = (ys >= eb.y1) & (ys < eb.y2)
        inside_x = (xs >= eb.x1) & (xs < eb.x2)
        gate[np.ix_(inside_y, inside_x)] = 1.0
    return gate


def downsample_mask(mask_image: np.ndarray, stride: int) -> np.ndarray:
    """Occlusion ground truth at feature resolution (center-pixel sample)."""
    m = np.asarray(mask_image)
    h = m.shape[0] // stride
    w = m.shape[1] // stride
    ys = np.minimum((np.arange(h) * stride + stride // 2), m.shape[0] - 1)
    xs = np.minimum((np.arange(w) * stride + stride // 2), m.shape[1] - 1)
    return (m[np.ix_(ys, xs)] > 0).astype(np.int64)


def segment_occlusions(featmap: torch.Tensor, boxes, head: SegmentationHead,
                       stride: int, factor: float = GATE_FACTOR) -> np.ndarray:
    """Argmax occluder labels, forced to 0 (non-occluder) outside the gate."""
    with torch.no_grad():
        logits = head(featmap if featmap.dim() == 3 else featmap[0])
    labels = logits.argmax(dim=0).numpy().astype(np.int64)
    gate = build_gate(boxes, labels.shape, stride, factor)
    return labels * (gate > 0)


def upsample_labels(labels: np.ndarray, stride: int) -> np.ndarray:
    """Nearest-neighbor upsampling of a label grid to image resolution."""
    return np.repeat(np.repeat(labels, stride, axis=0), stride, axis=1)
