"""Adversarial RoI mask generator and the masking strategy.

Masks live on the fixed 7x7 RoI grid.  A mask value of 0 marks a masked
(occluded) cell and 1 an untouched cell.  Three hand-designed mask
families (half masks, random pixel drop) complement the learned
generator, and one family is selected per foreground RoI per step.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch
import torch.nn as nn

ROI_SIZE = 7
ROI_CELLS = ROI_SIZE * ROI_SIZE

HALF_DIRECTIONS = ("left", "right", "top", "bottom")


class MaskType(Enum):
    GENERATED = "generated"
    HALF = "half"
    RANDOM_DROP = "random_drop"
    NONE = "none"


DEFAULT_MASK_TYPE_PROBS = {
    MaskType.GENERATED: 0.25,
    MaskType.HALF: 0.25,
    MaskType.RANDOM_DROP: 0.25,
    MaskType.NONE: 0.25,
}


@dataclass(frozen=True)
class MaskChoice:
    """One sampled masking decision for a single RoI."""

    mask_type: MaskType
    direction: str | None = None  # set iff mask_type is HALF


class MaskGenerator(nn.Module):
    """Per-RoI heat map head: four 3x3 convs plus a straight mapping.

    The main branch reduces channels C -> C/2 -> C/4 -> C/8 -> 1 with ELU
    between layers; the skip branch is the channel mean of the input.
    With all main-branch weights zero the output is exactly the channel
    mean, which gives tests an analytic identity path.
    """

    def __init__(self, in_channels: int = 64):
        super().__init__()
        if in_channels < 8:
            raise ValueError("need at least 8 input channels for the C/8 schedule")
        c = in_channels
        self.in_channels = c
        self.convs = nn.ModuleList([
            nn.Conv2d(c, c // 2, 3, padding=1),
            nn.Conv2d(c // 2, c // 4, 3, padding=1),
            nn.Conv2d(c // 4, c // 8, 3, padding=1),
            nn.Conv2d(c // 8, 1, 3, padding=1),
        ])
        self.act = nn.ELU()

    def forward(self, roi: torch.Tensor) -> torch.Tensor:
        """Map (N, C, 7, 7) RoI features to (N, 1, 7, 7) heat maps."""
        if roi.dim() != 4 or roi.shape[1] != self.in_channels:
            raise ValueError(f"expected (N, {self.in_channels}, 7, 7), got {tuple(roi.shape)}")
        if roi.shape[2] != ROI_SIZE or roi.shape[3] != ROI_SIZE:
            raise ValueError(f"RoI spatial size must be {ROI_SIZE}x{ROI_SIZE}")
        skip = roi.mean(dim=1, keepdim=True)
        h = roi
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = self.act(h)
        return h + skip


def binarize_lowest_k(heatmap: np.ndarray, fraction: float) -> np.ndarray:
    """Zero the k = max(1, floor(49 * fraction)) lowest heat cells.

    Ties break by row-major index so the result is a total order over
    (value, index) and fully deterministic.
    """
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    h = np.asarray(heatmap, dtype=np.float64).reshape(-1)
    if h.size != ROI_CELLS:
        raise ValueError(f"heat map must have {ROI_CELLS} cells, got {h.size}")
    if not np.all(np.isfinite(h)):
        raise ValueError("heat map contains non-finite values")
    k = mask_cell_count(fraction)
    order = np.argsort(h, kind="stable")  # stable sort = row-major tie-break
    mask = np.ones(ROI_CELLS, dtype=np.float64)
    mask[order[:k]] = 0.0
    return mask.reshape(ROI_SIZE, ROI_SIZE)


def mask_cell_count(fraction: float) -> int:
    """Number of masked cells for a given fraction of the 7x7 grid."""
    if not (0.0 < fraction < 1.0):
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    return max(1, int(np.floor(ROI_CELLS * fraction)))


def half_mask(direction: str) -> np.ndarray:
    """Mask 3 full columns (left/right) or rows (top/bottom) of the grid."""
    if direction not in HALF_DIRECTIONS:
        raise ValueError(f"unknown direction {direction!r}")
    mask = np.ones((ROI_SIZE, ROI_SIZE), dtype=np.float64)
    n = ROI_SIZE // 2
    if direction == "left":
        mask[:, :n] = 0.0
    elif direction == "right":
        mask[:, ROI_SIZE - n:] = 0.0
    elif direction == "top":
        mask[:n, :] = 0.0
    else:
        mask[ROI_SIZE - n:, :] = 0.0
    return mask


def random_drop_mask(rng: np.random.Generator) -> np.ndarray:
    """Drop exactly floor(49/2) = 24 cells chosen by a seeded permutation."""
    idx = rng.permutation(ROI_CELLS)[: ROI_CELLS // 2]
    mask = np.ones(ROI_CELLS, dtype=np.float64)
    mask[idx] = 0.0
    return mask.reshape(ROI_SIZE, ROI_SIZE)


def sample_mask_type(rng: np.random.Generator, probabilities=None) -> MaskChoice:
    """Sample one mask family; HALF draws a direction uniformly."""
    probs = dict(DEFAULT_MASK_TYPE_PROBS if probabilities is None else probabilities)
    tags = list(MaskType)
    p = np.array([float(probs.get(t, 0.0)) for t in tags], dtype=np.float64)
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"mask-type probabilities sum to {p.sum()}, expected 1")
    tag = tags[rng.choice(len(tags), p=p)]
    if tag is MaskType.HALF:
        return MaskChoice(tag, HALF_DIRECTIONS[rng.integers(len(HALF_DIRECTIONS))])
    return MaskChoice(tag)


def apply_mask(roi: np.ndarray | torch.Tensor, mask: np.ndarray) -> np.ndarray | torch.Tensor:
    """Multiply every channel of a (C, 7, 7) RoI cell-wise by a 7x7 mask."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (ROI_SIZE, ROI_SIZE):
        raise ValueError(f"mask shape {m.shape} != ({ROI_SIZE}, {ROI_SIZE})")
    if isinstance(roi, torch.Tensor):
        if roi.shape[-2:] != (ROI_SIZE, ROI_SIZE):
            raise ValueError(f"RoI spatial shape {tuple(roi.shape[-2:])} mismatch")
        return roi * torch.as_tensor(m, dtype=roi.dtype, device=roi.device)
    roi = np.asarray(roi)
    if roi.shape[-2:] != (ROI_SIZE, ROI_SIZE):
        raise ValueError(f"RoI spatial shape {roi.shape[-2:]} mismatch")
    return roi * m


def straight_through_mask(heatmap: torch.Tensor, fraction: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Binarize a (N, 1, 7, 7) heat map with straight-through gradients.

    Returns (mask, soft) where ``mask`` equals the hard 0/1 mask in the
    forward pass but backpropagates as ``soft = sigmoid(heatmap)``; the
    compact loss is computed on ``soft``.
    """
    soft = torch.sigmoid(heatmap)
    hard_np = np.stack([
        binarize_lowest_k(h.detach().cpu().numpy(), fraction)
        for h in heatmap.reshape(heatmap.shape[0], -1)
    ]).reshape(heatmap.shape[0], 1, ROI_SIZE, ROI_SIZE)
    hard = torch.as_tensor(hard_np, dtype=heatmap.dtype, device=heatmap.device)
    return hard + (soft - soft.detach()), soft
