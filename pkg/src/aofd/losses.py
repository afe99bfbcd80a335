"""Loss functions: multi-task detector loss, generator loss, compact loss.

Everything here is a pure function.  Torch tensors flow through with
autograd intact; plain arrays/floats come back as python floats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

# 3x3 compact kernel: center 1, eight neighbors -1/8.  Weights sum to 0.
COMPACT_KERNEL = np.array([
    [-0.125, -0.125, -0.125],
    [-0.125, 1.0, -0.125],
    [-0.125, -0.125, -0.125],
], dtype=np.float64)
COMPACT_KERNEL.setflags(write=False)


@dataclass(frozen=True)
class LossWeights:
    """Coefficients of the multi-task loss and the generator loss."""

    alpha: float = 1.0
    beta: float = 1.0
    mu: float = 1e-5
    gamma: float = 1e-6
    eta: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "mu", "gamma", "eta"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def _maybe_float(x: torch.Tensor, had_tensor: bool):
    return x if had_tensor else float(x.item())


def classification_loss(logits, labels):
    """Mean two-class softmax negative log-likelihood over a RoI batch."""
    had_tensor = isinstance(logits, torch.Tensor)
    logits_t = torch.as_tensor(logits, dtype=torch.float64) if not had_tensor else logits
    labels_np = labels.detach().cpu().numpy() if isinstance(labels, torch.Tensor) else np.asarray(labels)
    if not np.all(np.isin(labels_np, (0, 1))):
        raise ValueError("labels must be 0 (background) or 1 (face)")
    labels_t = torch.as_tensor(labels_np, dtype=torch.long, device=logits_t.device)
    loss = F.cross_entropy(logits_t.reshape(-1, 2), labels_t.reshape(-1))
    return _maybe_float(loss, had_tensor)


def bbox_regression_loss(pred_deltas, target_deltas, fg_indicator):
    """Smooth-L1 regression loss averaged over foreground RoIs.

    Per RoI the four coordinate errors are summed; the batch value is the
    mean over foreground rows.  Batches without foreground return 0.
    """
    had_tensor = isinstance(pred_deltas, torch.Tensor)
    pred = pred_deltas if had_tensor else torch.as_tensor(pred_deltas, dtype=torch.float64)
    tgt = torch.as_tensor(target_deltas, dtype=pred.dtype, device=pred.device)
    fg = torch.as_tensor(np.asarray(fg_indicator, dtype=bool), device=pred.device)
    if fg.sum() == 0:
        log.warning("bbox_regression_loss: batch has no foreground RoIs")
        return _maybe_float(pred.sum() * 0.0, had_tensor)
    diff = (pred.reshape(-1, 4) - tgt.reshape(-1, 4))[fg]
    a = diff.abs()
    per_coord = torch.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    loss = per_coord.sum(dim=1).mean()
    return _maybe_float(loss, had_tensor)


def compact_loss(mask, mode: str = "rectified"):
    """Compactness penalty of a 7x7 mask (0 = masked cell).

    ``(1 - mask)`` is convolved with the zero-sum 3x3 kernel under zero
    padding.  ``rectified`` (default) sums max(0, .) over cells, a
    perimeter-like penalty; ``literal`` sums the raw convolution, which
    is identically zero for interior masks because the kernel sums to 0.
    """
    if mode not in ("rectified", "literal"):
        raise ValueError(f"unknown compact-loss mode {mode!r}")
    had_tensor = isinstance(mask, torch.Tensor)
    m = mask if had_tensor else torch.as_tensor(np.asarray(mask, dtype=np.float64))
    vals = m.detach()
    if (vals < -1e-6).any() or (vals > 1.0 + 1e-6).any():
        raise ValueError("mask values must lie in [0, 1]")
    kernel = torch.as_tensor(COMPACT_KERNEL.copy(), dtype=m.dtype, device=m.device).reshape(1, 1, 3, 3)
    inv = (1.0 - m).reshape(-1, 1, m.shape[-2], m.shape[-1])
    conv = F.conv2d(inv, kernel, padding=1)
    if mode == "rectified":
        loss = torch.clamp(conv, min=0.0).sum(dim=(1, 2, 3)).mean()
    else:
        loss = conv.sum(dim=(1, 2, 3)).mean()
    return _maybe_float(loss, had_tensor)


def generator_loss(l_cls, l_com, weights: LossWeights = LossWeights()):
    """Adversarial generator objective: gamma * L_com - eta * L_c."""
    out = weights.gamma * l_com - weights.eta * l_cls
    if isinstance(out, torch.Tensor):
        return out
    if not np.isfinite(out):
        raise ValueError("non-finite generator loss component")
    return float(out)


def segmentation_loss(logits, target, gate):
    """Per-pixel two-class softmax loss averaged over gated pixels.

    ``logits`` is (2, H, W), ``target`` and ``gate`` are (H, W) binary
    grids.  An empty gate contributes 0 (early batches may have no boxes).
    """
    had_tensor = isinstance(logits, torch.Tensor)
    lg = logits if had_tensor else torch.as_tensor(logits, dtype=torch.float64)
    tgt = np.asarray(target.detach().cpu() if isinstance(target, torch.Tensor) else target)
    gt = np.asarray(gate.detach().cpu() if isinstance(gate, torch.Tensor) else gate).astype(bool)
    if lg.shape[0] != 2 or lg.shape[1:] != tgt.shape or tgt.shape != gt.shape:
        raise ValueError(f"shape mismatch: logits {tuple(lg.shape)}, target {tgt.shape}, gate {gt.shape}")
    if not gt.any():
        log.debug("segmentation_loss: empty gate")
        return _maybe_float(lg.sum() * 0.0, had_tensor)
    idx = torch.as_tensor(np.flatnonzero(gt.reshape(-1)), device=lg.device)
    flat = lg.reshape(2, -1).T[idx]
    labels = torch.as_tensor(tgt.reshape(-1)[np.flatnonzero(gt.reshape(-1))].astype(np.int64),
                             device=lg.device)
    loss = F.cross_entropy(flat, labels)
    return _maybe_float(loss, had_tensor)


def total_loss(l_cls, l_box, l_seg, weights: LossWeights = LossWeights()):
    """Multi-task detector loss alpha*L_c + beta*L_b + mu*L_s."""
    out = weights.alpha * l_cls + weights.beta * l_box + weights.mu * l_seg
    if isinstance(out, torch.Tensor):
        return out
    return float(out)
