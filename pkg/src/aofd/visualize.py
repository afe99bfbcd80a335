"""Overlay rendering: detection boxes, occlusion labels, RoI mask heat maps."""

from __future__ import annotations

import numpy as np
import torch
from PIL import Image, ImageDraw

from .geometry import BoundingBox, Detection
from .masks import ROI_SIZE, binarize_lowest_k
from .segmentation import segment_occlusions, upsample_labels


def _to_rgb(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = (np.clip(img, 0, 1) * 255).astype(np.uint8)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    return img


def overlay_boxes(image: np.ndarray, detections: list[Detection]) -> np.ndarray:
    """Green detection boxes with scores; emitted even when empty."""
    rgb = Image.fromarray(_to_rgb(image))
    draw = ImageDraw.Draw(rgb)
    for d in detections:
        b = d.box
        draw.rectangle([b.x1, b.y1, b.x2, b.y2], outline=(0, 220, 0), width=1)
        draw.text((b.x1 + 1, max(b.y1 - 10, 0)), f"{d.score:.2f}", fill=(0, 220, 0))
    return np.asarray(rgb)


def overlay_segmentation(image: np.ndarray, labels: np.ndarray, stride: int) -> np.ndarray:
    """Occluder-labeled cells tinted red at image resolution."""
    rgb = _to_rgb(image).astype(np.float64)
    up = upsample_labels(labels, stride)
    up = up[: rgb.shape[0], : rgb.shape[1]]
    sel = up > 0
    rgb[sel, 0] = np.minimum(255, rgb[sel, 0] * 0.5 + 160)
    rgb[sel, 1] *= 0.5
    rgb[sel, 2] *= 0.5
    return rgb.astype(np.uint8)


def mask_projection(box: BoundingBox, mask: np.ndarray,
                    image_size: tuple[int, int]) -> np.ndarray:
    """Project masked 7x7 cells onto image pixels (receptive-field region).

    Cell (i, j) of the RoI grid owns the box sub-rectangle
    [x1 + j*w/7, x1 + (j+1)*w/7) x [y1 + i*h/7, ...); the output is a
    binary image marking pixels whose center falls in a masked cell.
    """
    h, w = image_size
    out = np.zeros((h, w), dtype=np.uint8)
    ys, xs = np.mgrid[0:h, 0:w]
    cy, cx = ys + 0.5, xs + 0.5
    inside = (cx >= box.x1) & (cx < box.x2) & (cy >= box.y1) & (cy < box.y2)
    col = np.clip(((cx - box.x1) / box.width * ROI_SIZE).astype(int), 0, ROI_SIZE - 1)
    row = np.clip(((cy - box.y1) / box.height * ROI_SIZE).astype(int), 0, ROI_SIZE - 1)
    masked_cell = np.asarray(mask)[row, col] == 0
    out[inside & masked_cell] = 1
    return out


def overlay_roi_masks(image: np.ndarray, model, detections: list[Detection],
                      fraction: float = 1.0 / 3.0,
                      max_rois: int = 5) -> np.ndarray:
    """Generated masks for the top detections, shaded blue in image space."""
    from .detector import roi_pool_batch
    from .geometry import boxes_array
    rgb = _to_rgb(image).astype(np.float64)
    if model.generator is None or not detections:
        return rgb.astype(np.uint8)
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    with torch.no_grad():
        featmap = model.backbone(torch.as_tensor(img.astype(np.float32)))
        boxes = boxes_array([d.box for d in detections[:max_rois]])
        rois = roi_pool_batch(featmap, boxes, model.stride)
        heat = model.generator(rois)
    for d, h in zip(detections[:max_rois], heat[:, 0]):
        m = binarize_lowest_k(h.numpy(), fraction)
        proj = mask_projection(d.box, m, rgb.shape[:2])
        sel = proj > 0
        rgb[sel, 2] = np.minimum(255, rgb[sel, 2] * 0.5 + 160)
        rgb[sel, 0] *= 0.6
        rgb[sel, 1] *= 0.6
    return rgb.astype(np.uint8)


def render_scene_overlays(model, image: np.ndarray, score_threshold: float = 0.5):
    """The three visualization artifacts for one image."""
    dets = model.infer(image, score_threshold=score_threshold)
    box_img = overlay_boxes(image, dets)
    if model.segmentation is not None:
        img = np.asarray(image)
        if img.dtype == np.uint8:
            img = img.astype(np.float32) / 255.0
        with torch.no_grad():
            featmap = model.backbone(torch.as_tensor(img.astype(np.float32)))
        labels = segment_occlusions(featmap[0], [d.box for d in dets],
                                    model.segmentation, model.stride)
        seg_img = overlay_segmentation(image, labels, model.stride)
    else:
        seg_img = _to_rgb(image)
    mask_img = overlay_roi_masks(image, model, dets)
    return box_img, seg_img, mask_img
