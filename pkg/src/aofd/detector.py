"""Minimal two-stage detector hosting the mask generator after RoI pooling.

The backbone is a small stride-8 conv stack (desk scale, CPU friendly);
proposals come from a single-level RPN over configurable anchors; pooled
7x7 RoIs feed the classification and box-regression heads.  Masking is
train-time only: inference never touches the mask generator.
"""

from __future__ import annotations

import io
import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (
    Annotation,
    BoundingBox,
    Detection,
    apply_deltas,
    boxes_array,
    encode_deltas,
    iou_matrix,
    nms,
)
from .masks import ROI_SIZE, MaskGenerator
from .segmentation import SegmentationHead

CHECKPOINT_MAGIC = "AOFD-CKPT-1"


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid: one anchor per (cell, ratio, scale).

    Ratios are h/w; scales are areas in pixels^2.  Full-image-scale
    detectors typically use areas like (64^2 .. 512^2); the desk-scale
    defaults below match the synthetic faces (roughly 16-96 px).
    """

    aspect_ratios: tuple = (1.7, 1.0, 1.3)
    scales: tuple = (16.0 ** 2, 32.0 ** 2, 64.0 ** 2, 96.0 ** 2)
    stride: int = 8

    def __post_init__(self):
        if any(s <= 0 for s in self.scales):
            raise ValueError("scales must be positive")
        if list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be sorted ascending")

    @property
    def num_anchors(self) -> int:
        return len(self.aspect_ratios) * len(self.scales)


def generate_anchors(cfg: AnchorConfig, map_size: tuple[int, int]) -> np.ndarray:
    """All anchors for an H x W feature map, shape (H*W*A, 4).

    Cell order is row-major; within a cell, ratio-major then scale.  Each
    anchor is centered on its cell with area = scale and h/w = ratio.
    """
    h, w = map_size
    base = []
    for r in cfg.aspect_ratios:
        for s in cfg.scales:
            bw = np.sqrt(s / r)
            bh = np.sqrt(s * r)
            base.append([-bw / 2, -bh / 2, bw / 2, bh / 2])
    base = np.array(base, dtype=np.float64)  # (A, 4)
    ys, xs = np.mgrid[0:h, 0:w]
    centers_x = (xs.reshape(-1) + 0.5) * cfg.stride
    centers_y = (ys.reshape(-1) + 0.5) * cfg.stride
    shifts = np.stack([centers_x, centers_y, centers_x, centers_y], axis=1)
    return (shifts[:, None, :] + base[None, :, :]).reshape(-1, 4)


@dataclass
class ProposalSet:
    """NMS-filtered region proposals, objectness descending."""

    boxes: np.ndarray        # (N, 4)
    objectness: np.ndarray   # (N,), sorted descending

    def __post_init__(self):
        if len(self.objectness) > 1 and np.any(np.diff(self.objectness) > 1e-12):
            raise ValueError("proposal scores must be sorted descending")


@dataclass
class RoISampleBatch:
    """Sampled training RoIs with labels and regression targets."""

    boxes: np.ndarray          # (B, 4)
    labels: np.ndarray         # (B,), 1 = face, 0 = background
    reg_targets: np.ndarray    # (B, 4), zeros for background rows
    matched_gt: np.ndarray     # (B,), gt index or -1

    @property
    def num_fg(self) -> int:
        return int(self.labels.sum())


class Backbone(nn.Module):
    """Four conv blocks, total stride 8, output channels ``channels``."""

    def __init__(self, in_channels: int = 1, channels: int = 64):
        super().__init__()
        c = channels
        self.stride = 8
        self.out_channels = c
        # bias-free convs: an all-black image region maps to exactly zero
        # activations (ELU(0) = 0), so zeroing pooled feature cells during
        # masked training is the feature-space image of a black occluder
        self.layers = nn.Sequential(
            nn.Conv2d(in_channels, c // 4, 3, stride=2, padding=1, bias=False), nn.ELU(),
            nn.Conv2d(c // 4, c // 2, 3, stride=2, padding=1, bias=False), nn.ELU(),
            nn.Conv2d(c // 2, c, 3, stride=2, padding=1, bias=False), nn.ELU(),
            # 1x1 mixing layer: keeps the receptive field small (15 px) so
            # dark-occluded face interiors map to near-zero feature cells
            nn.Conv2d(c, c, 1, bias=False), nn.ELU(),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() == 2:
            image = image[None, None]
        elif image.dim() == 3:
            image = image[None]
        h, w = image.shape[-2:]
        if h < self.stride or w < self.stride:
            raise ValueError(f"image {h}x{w} smaller than one stride ({self.stride})")
        pad_h = (-h) % self.stride
        pad_w = (-w) % self.stride
        if pad_h or pad_w:
            image = F.pad(image, (0, pad_w, 0, pad_h))
        return self.layers(image)


class RPN(nn.Module):
    """Single-level region proposal head."""

    def __init__(self, channels: int = 64, num_anchors: int = 12):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.act = nn.ELU()
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, num_anchors * 4, 1)

    def forward(self, featmap: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.act(self.conv(featmap))
        return self.objectness(h), self.deltas(h)


class DetectionHeads(nn.Module):
    """Classification (2 logits) and box regression (4 deltas) per RoI."""

    def __init__(self, channels: int = 64, hidden: int = 256):
        super().__init__()
        self.fc = nn.Linear(channels * ROI_SIZE * ROI_SIZE, hidden)
        self.act = nn.ELU()
        self.cls = nn.Linear(hidden, 2)
        self.reg = nn.Linear(hidden, 4)

    def forward(self, rois: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.act(self.fc(rois.reshape(rois.shape[0], -1)))
        return self.cls(h), self.reg(h)


def roi_pool(featmap: torch.Tensor, box, stride: int) -> torch.Tensor:
    """Max-pool the feature cells under ``box`` onto a fixed 7x7 grid."""
    if isinstance(box, BoundingBox):
        box = box.as_array()
    x1, y1, x2, y2 = [float(v) for v in box]
    if featmap.dim() == 4:
        featmap = featmap[0]
    _, fh, fw = featmap.shape
    img_w, img_h = fw * stride, fh * stride
    if x2 <= 0 or y2 <= 0 or x1 >= img_w or y1 >= img_h:
        raise ValueError(f"box {box} lies fully outside the {img_w}x{img_h} image")
    c0 = min(max(int(np.floor(x1 / stride)), 0), fw - 1)
    r0 = min(max(int(np.floor(y1 / stride)), 0), fh - 1)
    c1 = max(min(int(np.ceil(x2 / stride)), fw), c0 + 1)
    r1 = max(min(int(np.ceil(y2 / stride)), fh), r0 + 1)
    crop = featmap[:, r0:r1, c0:c1]
    return F.adaptive_max_pool2d(crop, (ROI_SIZE, ROI_SIZE))


def roi_pool_batch(featmap: torch.Tensor, boxes: np.ndarray, stride: int) -> torch.Tensor:
    """Pool many boxes; returns (N, C, 7, 7)."""
    if len(boxes) == 0:
        c = featmap.shape[-3]
        return featmap.new_zeros((0, c, ROI_SIZE, ROI_SIZE))
    return torch.stack([roi_pool(featmap, b, stride) for b in boxes])


def propose(featmap: torch.Tensor, rpn: RPN, cfg: AnchorConfig,
            image_size: tuple[int, int], pre_nms_top_n: int = 1000,
            post_nms_top_n: int = 100, nms_iou: float = 0.7,
            min_size: float = 4.0) -> ProposalSet:
    """Score and regress anchors, then NMS; scores are sigmoid objectness."""
    if featmap.dim() == 4:
        featmap = featmap[0]
    obj_logits, delta_maps = rpn(featmap[None])
    a = cfg.num_anchors
    fh, fw = featmap.shape[-2:]
    anchors = generate_anchors(cfg, (fh, fw))
    # (A, H, W) -> row-major cells, ratio/scale within cell
    scores = torch.sigmoid(obj_logits[0]).permute(1, 2, 0).reshape(-1).detach().numpy()
    deltas = delta_maps[0].permute(1, 2, 0).reshape(-1, 4).detach().numpy()
    boxes = apply_deltas(anchors, deltas)
    img_h, img_w = image_size
    boxes[:, 0::2] = boxes[:, 0::2].clip(0, img_w)
    boxes[:, 1::2] = boxes[:, 1::2].clip(0, img_h)
    valid = (boxes[:, 2] - boxes[:, 0] >= min_size) & (boxes[:, 3] - boxes[:, 1] >= min_size)
    boxes, scores = boxes[valid], scores[valid]
    if len(boxes) == 0:
        return ProposalSet(np.zeros((0, 4)), np.zeros((0,)))
    order = np.argsort(-scores, kind="stable")[:pre_nms_top_n]
    boxes, scores = boxes[order], scores[order]
    keep = nms(boxes, scores, nms_iou)[:post_nms_top_n]
    return ProposalSet(boxes[keep], scores[keep])


def assign_and_sample(proposals: np.ndarray, gts: list[Annotation],
                      rng: np.random.Generator, batch_size: int = 32,
                      fg_fraction: float = 0.25, fg_iou: float = 0.5) -> RoISampleBatch:
    """Label proposals against ground truth and sample at a 1:3 fg:bg ratio.

    Foreground: IoU > ``fg_iou`` with any non-ignored gt.  Proposals whose
    only above-threshold match is an ignored gt are excluded entirely,
    mirroring the evaluation-side ignore semantics.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    if len(proposals) == 0:
        raise ValueError("need at least one proposal")
    live = [g for g in gts if g.occlusion_state != "ignored"]
    ignored = [g for g in gts if g.occlusion_state == "ignored"]
    live_boxes = boxes_array([g.box for g in live])
    n = len(proposals)
    max_iou = np.zeros(n)
    best_gt = np.full(n, -1, dtype=np.int64)
    if len(live) > 0:
        ious = iou_matrix(proposals, live_boxes)
        max_iou = ious.max(axis=1)
        best_gt = ious.argmax(axis=1)
    excluded = np.zeros(n, dtype=bool)
    if ignored:
        ign_iou = iou_matrix(proposals, boxes_array([g.box for g in ignored])).max(axis=1)
        excluded = (ign_iou > fg_iou) & ~(max_iou > fg_iou)
    fg_idx = np.flatnonzero((max_iou > fg_iou) & ~excluded)
    bg_idx = np.flatnonzero(~(max_iou > fg_iou) & ~excluded)
    n_fg = min(len(fg_idx), int(round(batch_size * fg_fraction)))
    n_bg = min(len(bg_idx), batch_size - n_fg)
    fg_pick = rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else np.array([], dtype=np.int64)
    bg_pick = rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else np.array([], dtype=np.int64)
    pick = np.concatenate([fg_pick, bg_pick])
    labels = np.concatenate([np.ones(n_fg, dtype=np.int64), np.zeros(n_bg, dtype=np.int64)])
    targets = np.zeros((len(pick), 4))
    matched = np.full(len(pick), -1, dtype=np.int64)
    if n_fg:
        gt_boxes = boxes_array([live[best_gt[i]].box for i in fg_pick])
        targets[:n_fg] = encode_deltas(proposals[fg_pick], gt_boxes)
        matched[:n_fg] = best_gt[fg_pick]
    return RoISampleBatch(proposals[pick], labels, targets, matched)


@dataclass
class ModelConfig:
    """Desk-scale model hyperparameters."""

    in_channels: int = 1
    channels: int = 64
    anchor: AnchorConfig = field(default_factory=AnchorConfig)
    proposal_nms_iou: float = 0.7
    pre_nms_top_n: int = 1000
    post_nms_top_n: int = 100

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "channels": self.channels,
            "aspect_ratios": list(self.anchor.aspect_ratios),
            "scales": list(self.anchor.scales),
            "stride": self.anchor.stride,
            "proposal_nms_iou": self.proposal_nms_iou,
            "pre_nms_top_n": self.pre_nms_top_n,
            "post_nms_top_n": self.post_nms_top_n,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            in_channels=d["in_channels"], channels=d["channels"],
            anchor=AnchorConfig(tuple(d["aspect_ratios"]), tuple(d["scales"]), d["stride"]),
            proposal_nms_iou=d["proposal_nms_iou"],
            pre_nms_top_n=d["pre_nms_top_n"], post_nms_top_n=d["post_nms_top_n"],
        )


class AOFDModel(nn.Module):
    """Backbone + RPN + heads + mask generator + segmentation branch."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 with_generator: bool = True, with_segmentation: bool = True):
        super().__init__()
        self.config = config or ModelConfig()
        torch.manual_seed(seed)
        c = self.config.channels
        self.backbone = Backbone(self.config.in_channels, c)
        self.rpn = RPN(c, self.config.anchor.num_anchors)
        self.heads = DetectionHeads(c)
        self.generator = MaskGenerator(c) if with_generator else None
        self.segmentation = SegmentationHead(c) if with_segmentation else None

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def propose(self, featmap: torch.Tensor, image_size: tuple[int, int]) -> ProposalSet:
        return propose(featmap, self.rpn, self.config.anchor, image_size,
                       pre_nms_top_n=self.config.pre_nms_top_n,
                       post_nms_top_n=self.config.post_nms_top_n,
                       nms_iou=self.config.proposal_nms_iou)

    @torch.no_grad()
    def infer(self, image: np.ndarray, score_threshold: float = 0.5,
              nms_iou: float = 0.3) -> list[Detection]:
        """Full inference path; no masking is ever applied here."""
        image = np.asarray(image)
        if image.dtype == np.uint8:
            image = image.astype(np.float32) / 255.0
        img_t = torch.as_tensor(image.astype(np.float32))
        img_h, img_w = img_t.shape[-2:]
        featmap = self.backbone(img_t)
        props = self.propose(featmap, (img_h, img_w))
        if len(props.boxes) == 0:
            return []
        rois = roi_pool_batch(featmap, props.boxes, self.stride)
        logits, deltas = self.heads(rois)
        probs = torch.softmax(logits, dim=1)[:, 1].numpy().astype(np.float64)
        boxes = apply_deltas(props.boxes, deltas.numpy())
        boxes[:, 0::2] = boxes[:, 0::2].clip(0, img_w)
        boxes[:, 1::2] = boxes[:, 1::2].clip(0, img_h)
        valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
        boxes, probs = boxes[valid], probs[valid]
        order = np.argsort(-probs, kind="stable")
        boxes, probs = boxes[order], probs[order]
        keep = nms(boxes, probs, nms_iou)
        out = []
        for i in keep:
            if probs[i] >= score_threshold:
                out.append(Detection(BoundingBox(*boxes[i]), min(1.0, float(probs[i]))))
        return out


# ---------------------------------------------------------------------------
# Checkpoint format: single archive, magic "AOFD-CKPT-1".
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: AOFDModel, seeds: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "magic": CHECKPOINT_MAGIC,
        "config": model.config.to_dict(),
        "components": sorted(name for name, m in _components(model)),
        "state": {name: m.state_dict() for name, m in _components(model)},
        "seeds": seeds or {},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> AOFDModel:
    payload = torch.load(path, weights_only=False)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not an AOFD checkpoint: {path}")
    cfg = ModelConfig.from_dict(payload["config"])
    comps = set(payload["components"])
    model = AOFDModel(cfg, with_generator="generator" in comps,
                      with_segmentation="segmentation" in comps)
    for name, mod in _components(model):
        mod.load_state_dict(payload["state"][name])
    model.eval()
    return model


def checkpoint_metadata(path) -> dict:
    payload = torch.load(path, weights_only=False)
    if payload.get("magic") != CHECKPOINT_MAGIC:
        raise ValueError(f"not an AOFD checkpoint: {path}")
    return {k: payload[k] for k in ("config", "components", "seeds", "extra")}


def _components(model: AOFDModel):
    comps = [("backbone", model.backbone), ("rpn", model.rpn), ("heads", model.heads)]
    if model.generator is not None:
        comps.append(("generator", model.generator))
    if model.segmentation is not None:
        comps.append(("segmentation", model.segmentation))
    return comps


def state_hash(module: nn.Module) -> str:
    """Deterministic hash of a module's parameters and buffers."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()
