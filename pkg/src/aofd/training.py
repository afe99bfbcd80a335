"""Phased adversarial training: pretrain, generator stage, joint stage.

Five phases run in order, each writing its own checkpoint:

  pretrain_detector   detector only, no masking, no segmentation
  train_generator     adversarial mask generator, everything else frozen
  joint_seg_overfit   full loss on the small seg set (detector + branch)
  joint_combined      detection set + seg set interleaved; seg-set steps
                      carry the full loss with a tiny segmentation weight;
                      detection-only samples give the segmentation branch
                      exactly zero gradient
  seg_tune            final passes over the seg set, segmentation head only

The mask generator stays frozen throughout the joint phases.  All
randomness is drawn from one numpy generator, so a fixed seed plus a
fixed config reproduces checkpoints bit-exactly on a platform.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .detector import (
    AOFDModel,
    ModelConfig,
    assign_and_sample,
    generate_anchors,
    roi_pool_batch,
    save_checkpoint,
)
from .geometry import boxes_array, encode_deltas, iou_matrix
from .losses import (
    LossWeights,
    bbox_regression_loss,
    classification_loss,
    compact_loss,
    segmentation_loss,
    total_loss,
)
from .masks import (
    MaskType,
    apply_mask,
    half_mask,
    random_drop_mask,
    sample_mask_type,
    straight_through_mask,
)
from .segmentation import build_gate, downsample_mask

log = logging.getLogger(__name__)

PHASES = ("pretrain_detector", "train_generator", "joint_seg_overfit",
          "joint_combined", "seg_tune")


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and hyperparameters of the full pipeline.

    Iteration defaults are the desk-scale analog (10x down) of the
    10k / 50k / 3-epoch schedule; they are config values, not claims.
    """

    seed: int = 0
    learning_rate: float = 0.001
    generator_lr: float = 0.01        # adversarial phase; hotter than the detector
    momentum: float = 0.9
    batch_size: int = 1                # images per step
    roi_batch: int = 32
    fg_fraction: float = 0.25          # 1:3 fg:bg
    weights: LossWeights = field(default_factory=LossWeights)
    generator_fraction: float = 0.25   # mask area while training the generator
    joint_fraction: float = 1.0 / 3.0  # mask area during joint training
    mask_type_probs: dict | None = None
    pretrain_steps: int = 1000
    generator_steps: int = 300
    joint_seg_steps: int = 1000
    joint_combined_steps: int = 5000
    seg_tune_epochs: int = 3
    seg_overfit_mu: float = 1.0
    combined_seg_mu: float = 1e-7
    seg_interleave: int = 4            # every k-th combined step uses the seg set
    use_masking: bool = True           # whole masking strategy on/off
    use_generator: bool = True
    use_segmentation: bool = True
    use_compact: bool = True

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["weights"] = dict(self.weights.__dict__)
        return d


@dataclass
class Sample:
    """One training image with ground truth, decoded into arrays."""

    image: np.ndarray          # (H, W) uint8
    annotations: list
    mask: np.ndarray | None    # (H, W) {0,1}; None = no segmentation GT
    has_seg: bool = True


def scenes_to_samples(scenes, with_seg: bool) -> list[Sample]:
    """Adapt SceneRecord objects; ``with_seg=False`` drops the mask GT so
    the scenes act as a detection-only set."""
    return [Sample(image=s.image, annotations=list(s.annotations),
                   mask=s.mask if with_seg else None, has_seg=with_seg)
            for s in scenes]


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(image, dtype=np.float32) / 255.0)


def _item(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def _rpn_targets(anchors, gts, rng, fg_iou=0.7, bg_iou=0.3, batch=32):
    """Anchor labels for RPN training: standard IoU rules, 1:1 sampling."""
    live = boxes_array([g.box for g in gts if g.occlusion_state != "ignored"])
    n = len(anchors)
    labels = np.full(n, -1, dtype=np.int64)  # -1 = unused
    targets = np.zeros((n, 4))
    if len(live) == 0:
        bg = rng.choice(n, size=min(batch, n), replace=False)
        labels[bg] = 0
        return labels, targets
    ious = iou_matrix(anchors, live)
    max_iou = ious.max(axis=1)
    best = ious.argmax(axis=1)
    labels[max_iou < bg_iou] = 0
    labels[max_iou >= fg_iou] = 1
    labels[ious.argmax(axis=0)] = 1  # best anchor per gt
    fg_idx = np.flatnonzero(labels == 1)
    bg_idx = np.flatnonzero(labels == 0)
    n_fg = min(len(fg_idx), batch // 2)
    n_bg = min(len(bg_idx), batch - n_fg)
    keep_fg = rng.choice(fg_idx, size=n_fg, replace=False) if n_fg else fg_idx
    keep_bg = rng.choice(bg_idx, size=n_bg, replace=False) if n_bg else bg_idx
    out = np.full(n, -1, dtype=np.int64)
    out[keep_fg] = 1
    out[keep_bg] = 0
    if n_fg:
        targets[keep_fg] = encode_deltas(anchors[keep_fg], live[best[keep_fg]])
    return out, targets


def _rpn_loss(model: AOFDModel, featmap: torch.Tensor, gts, rng):
    fh, fw = featmap.shape[-2:]
    anchors = generate_anchors(model.config.anchor, (fh, fw))
    labels, targets = _rpn_targets(anchors, gts, rng)
    obj_logits, delta_maps = model.rpn(featmap[None] if featmap.dim() == 3 else featmap)
    obj = obj_logits[0].permute(1, 2, 0).reshape(-1)
    deltas = delta_maps[0].permute(1, 2, 0).reshape(-1, 4)
    used = np.flatnonzero(labels >= 0)
    if len(used) == 0:
        return featmap.sum() * 0.0
    idx = torch.as_tensor(used)
    lab = torch.as_tensor(labels[used], dtype=torch.float32)
    cls = torch.nn.functional.binary_cross_entropy_with_logits(obj[idx], lab)
    fg = np.flatnonzero(labels == 1)
    if len(fg) == 0:
        return cls
    reg = bbox_regression_loss(deltas[torch.as_tensor(fg)],
                               targets[fg], np.ones(len(fg), dtype=bool))
    return cls + reg


def _apply_masking_strategy(model, rois, labels, rng, cfg: TrainConfig,
                            fraction: float):
    """Mask foreground RoIs per the sampled mask-type strategy.

    The generator runs under no_grad here (its parameters are frozen in
    every phase that calls this) and the hard mask multiplies features.
    """
    if rois.shape[0] == 0:
        return rois
    out = []
    for i in range(rois.shape[0]):
        roi = rois[i]
        if labels[i] != 1:
            out.append(roi)
            continue
        choice = sample_mask_type(rng, cfg.mask_type_probs)
        kind = choice.mask_type
        if kind is MaskType.GENERATED and (model.generator is None or not cfg.use_generator):
            kind = MaskType.NONE
        if kind is MaskType.NONE:
            out.append(roi)
        elif kind is MaskType.HALF:
            out.append(apply_mask(roi, half_mask(choice.direction)))
        elif kind is MaskType.RANDOM_DROP:
            out.append(apply_mask(roi, random_drop_mask(rng)))
        else:
            with torch.no_grad():
                heat = model.generator(roi.detach()[None])
            from .masks import binarize_lowest_k
            m = binarize_lowest_k(heat[0, 0].numpy(), fraction)
            out.append(apply_mask(roi, m))
    return torch.stack(out)


def detection_step(model: AOFDModel, sample: Sample, rng, cfg: TrainConfig,
                   masking: bool, mu: float, fraction: float | None = None):
    """One detection (+ optional segmentation) training step's loss."""
    img = _image_tensor(sample.image)
    img_h, img_w = img.shape[-2:]
    featmap = model.backbone(img)
    rpn_loss = _rpn_loss(model, featmap, sample.annotations, rng)
    with torch.no_grad():
        props = model.propose(featmap, (img_h, img_w))
    live_boxes = boxes_array([g.box for g in sample.annotations
                              if g.occlusion_state != "ignored"])
    proposals = props.boxes
    if len(live_boxes):
        proposals = np.concatenate([proposals, live_boxes]) if len(proposals) else live_boxes
    if len(proposals) == 0:
        return None
    batch = assign_and_sample(proposals, sample.annotations, rng,
                              batch_size=cfg.roi_batch, fg_fraction=cfg.fg_fraction)
    rois = roi_pool_batch(featmap, batch.boxes, model.stride)
    if masking:
        rois = _apply_masking_strategy(model, rois, batch.labels, rng, cfg,
                                       fraction or cfg.joint_fraction)
    logits, deltas = model.heads(rois)
    l_cls = classification_loss(logits, batch.labels)
    l_box = bbox_regression_loss(deltas, batch.reg_targets, batch.labels == 1)
    l_seg = torch.zeros(())
    weights = replace(cfg.weights, mu=mu)
    if mu > 0 and sample.has_seg and sample.mask is not None and model.segmentation is not None:
        seg_logits = model.segmentation(featmap[0])
        gate = build_gate([g.box for g in sample.annotations
                           if g.occlusion_state != "ignored"],
                          seg_logits.shape[-2:], model.stride)
        target = downsample_mask(sample.mask, model.stride)
        l_seg = segmentation_loss(seg_logits, target, gate)
    loss = total_loss(l_cls, l_box, l_seg, weights) + rpn_loss
    record = {"l_cls": _item(l_cls), "l_box": _item(l_box),
              "l_seg": _item(l_seg), "l_rpn": _item(rpn_loss),
              "l_total": _item(loss)}
    return loss, record


def segmentation_step(model: AOFDModel, sample: Sample, cfg: TrainConfig,
                      mu: float):
    """Pure segmentation step: only the gated segmentation loss.

    Used by the final tuning phase, where everything but the
    segmentation head is frozen and the detection losses are moot.
    """
    if model.segmentation is None or sample.mask is None:
        return None
    img = _image_tensor(sample.image)
    featmap = model.backbone(img)
    seg_logits = model.segmentation(featmap[0])
    gate = build_gate([g.box for g in sample.annotations
                       if g.occlusion_state != "ignored"],
                      seg_logits.shape[-2:], model.stride)
    target = downsample_mask(sample.mask, model.stride)
    l_seg = segmentation_loss(seg_logits, target, gate)
    loss = mu * l_seg
    return loss, {"l_seg": _item(l_seg), "l_total": _item(loss)}


def generator_step(model: AOFDModel, sample: Sample, rng, cfg: TrainConfig):
    """Adversarial generator step: L_g = gamma * L_com - eta * L_c.

    Only generator parameters receive gradients; features and heads are
    detached/frozen.  Gradients cross the binarization straight-through.
    """
    img = _image_tensor(sample.image)
    with torch.no_grad():
        featmap = model.backbone(img)
        props = model.propose(featmap, img.shape[-2:])
    live_boxes = boxes_array([g.box for g in sample.annotations
                              if g.occlusion_state != "ignored"])
    if len(live_boxes) == 0:
        return None
    proposals = np.concatenate([props.boxes, live_boxes]) if len(props.boxes) else live_boxes
    batch = assign_and_sample(proposals, sample.annotations, rng,
                              batch_size=cfg.roi_batch, fg_fraction=cfg.fg_fraction)
    fg = batch.labels == 1
    if not fg.any():
        return None
    rois = roi_pool_batch(featmap, batch.boxes[fg], model.stride).detach()
    heat = model.generator(rois)
    hard, soft = straight_through_mask(heat, cfg.generator_fraction)
    masked = rois * hard
    logits, _ = model.heads(masked)
    l_cls = classification_loss(logits, np.ones(int(fg.sum()), dtype=np.int64))
    l_com = compact_loss(soft, "rectified")
    gamma = cfg.weights.gamma if cfg.use_compact else 0.0
    loss = gamma * l_com - cfg.weights.eta * l_cls
    record = {"l_cls": _item(l_cls), "l_com": _item(l_com), "l_g": _item(loss)}
    return loss, record


class Trainer:
    """Runs the five-phase schedule and writes per-phase checkpoints."""

    def __init__(self, model: AOFDModel, cfg: TrainConfig,
                 det_samples: list[Sample], seg_samples: list[Sample],
                 out_dir=None):
        self.model = model
        self.cfg = cfg
        self.det = det_samples
        self.seg = seg_samples
        self.out_dir = Path(out_dir) if out_dir else None
        self.rng = np.random.default_rng(cfg.seed)
        self.records: list[dict] = []
        self.step_count = 0

    # -- parameter groups ---------------------------------------------------

    def _detector_params(self, include_seg: bool):
        groups = [self.model.backbone, self.model.rpn, self.model.heads]
        if include_seg and self.model.segmentation is not None:
            groups.append(self.model.segmentation)
        return [p for m in groups for p in m.parameters()]

    def _set_trainable(self, modules_on, modules_off):
        for m in modules_on:
            if m is not None:
                m.requires_grad_(True)
        for m in modules_off:
            if m is not None:
                m.requires_grad_(False)

    def _optimizer(self, params):
        return torch.optim.SGD(params, lr=self.cfg.learning_rate,
                               momentum=self.cfg.momentum)

    # -- logging ------------------------------------------------------------

    def _log(self, phase, record):
        record = {"step": self.step_count, "phase": phase, **record}
        for k, v in record.items():
            if isinstance(v, float) and not np.isfinite(v):
                self._dump_diagnostics(record)
                raise FloatingPointError(f"non-finite {k} at step {self.step_count}: {record}")
        self.records.append(record)
        self.step_count += 1

    def _dump_diagnostics(self, record):
        if self.out_dir:
            (self.out_dir / "diagnostic_dump.json").write_text(json.dumps(record))

    def save_log(self, path=None):
        path = path or (self.out_dir / "train_log.jsonl" if self.out_dir else None)
        if path:
            with open(path, "w") as fh:
                for r in self.records:
                    fh.write(json.dumps(r) + "\n")

    def _checkpoint(self, phase):
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(self.out_dir / f"{phase}.ckpt", self.model,
                            seeds={"seed": self.cfg.seed},
                            extra={"phase": phase, "train_config": self.cfg.to_dict()})

    # -- phases ---------------------------------------------------------------

    def _draw(self, samples) -> Sample:
        return samples[int(self.rng.integers(len(samples)))]

    def pretrain_detector(self):
        if not self.det:
            raise ValueError("detection dataset is empty")
        self._set_trainable([self.model.backbone, self.model.rpn, self.model.heads],
                            [self.model.generator, self.model.segmentation])
        opt = self._optimizer(self._detector_params(include_seg=False))
        for _ in range(self.cfg.pretrain_steps):
            out = detection_step(self.model, self._draw(self.det), self.rng,
                                 self.cfg, masking=False, mu=0.0)
            if out is None:
                continue
            loss, rec = out
            opt.zero_grad()
            loss.backward()
            opt.step()
            self._log("pretrain_detector", rec)
        self._checkpoint("pretrain_detector")

    def train_generator(self):
        if self.model.generator is None or not self.cfg.use_generator:
            log.info("generator disabled; skipping train_generator")
            self._checkpoint("train_generator")
            return
        self._set_trainable([self.model.generator],
                            [self.model.backbone, self.model.rpn,
                             self.model.heads, self.model.segmentation])
        opt = torch.optim.SGD(self.model.generator.parameters(),
                              lr=self.cfg.generator_lr, momentum=self.cfg.momentum)
        for _ in range(self.cfg.generator_steps):
            out = generator_step(self.model, self._draw(self.det), self.rng, self.cfg)
            if out is None:
                continue
            loss, rec = out
            opt.zero_grad()
            loss.backward()
            opt.step()
            self._log("train_generator", rec)
        self._checkpoint("train_generator")

    def _det_step(self, opt, sample, phase):
        out = detection_step(self.model, sample, self.rng, self.cfg,
                             masking=self.cfg.use_masking, mu=0.0,
                             fraction=self.cfg.joint_fraction)
        self._apply(opt, out, phase)

    def _seg_set_step(self, opt, sample, mu, phase):
        """Joint-phase step on the segmentation set: full loss with the
        phase's segmentation weight.  Without the segmentation branch the
        set has no role, so these steps are skipped entirely.  RoI masking
        is never applied here: the set's faces already carry real occlusion,
        and masking them on top would double-occlude."""
        if not self.cfg.use_segmentation:
            return
        out = detection_step(self.model, sample, self.rng, self.cfg,
                             masking=False, mu=mu,
                             fraction=self.cfg.joint_fraction)
        self._apply(opt, out, phase)

    def _apply(self, opt, out, phase):
        if out is None:
            return
        loss, rec = out
        opt.zero_grad()
        loss.backward()
        opt.step()
        self._log(phase, rec)

    def _seg_params(self):
        groups = [self.model.backbone]
        if self.model.segmentation is not None:
            groups.append(self.model.segmentation)
        return [p for m in groups for p in m.parameters()]

    def joint_seg_overfit(self):
        if not self.seg:
            raise ValueError("segmentation dataset is empty")
        self._set_trainable([self.model.backbone, self.model.rpn,
                             self.model.heads, self.model.segmentation],
                            [self.model.generator])
        opt = self._optimizer(self._detector_params(include_seg=True))
        for _ in range(self.cfg.joint_seg_steps):
            self._seg_set_step(opt, self._draw(self.seg),
                               self.cfg.seg_overfit_mu, "joint_seg_overfit")
        self._checkpoint("joint_seg_overfit")

    def joint_combined(self):
        if not self.det or not self.seg:
            raise ValueError("both datasets are required for the combined phase")
        self._set_trainable([self.model.backbone, self.model.rpn,
                             self.model.heads, self.model.segmentation],
                            [self.model.generator])
        opt = self._optimizer(self._detector_params(include_seg=True))
        for i in range(self.cfg.joint_combined_steps):
            use_seg_set = (i % self.cfg.seg_interleave) == (self.cfg.seg_interleave - 1)
            if use_seg_set:
                self._seg_set_step(opt, self._draw(self.seg),
                                   self.cfg.combined_seg_mu, "joint_combined")
            else:
                self._det_step(opt, self._draw(self.det), "joint_combined")
        self._checkpoint("joint_combined")

    def seg_tune(self):
        if not self.seg:
            raise ValueError("segmentation dataset is empty")
        # final tuning touches only the segmentation head, so the
        # detection-tuned backbone stays frozen after the combined phase
        self._set_trainable([self.model.segmentation],
                            [self.model.backbone, self.model.rpn,
                             self.model.heads, self.model.generator])
        if self.model.segmentation is None or not self.cfg.use_segmentation:
            self._checkpoint("seg_tune")
            return
        opt = self._optimizer(list(self.model.segmentation.parameters()))
        for _ in range(self.cfg.seg_tune_epochs):
            for sample in self.seg:
                self._apply(opt, segmentation_step(self.model, sample, self.cfg,
                                                   self.cfg.seg_overfit_mu),
                            "seg_tune")
        self._checkpoint("seg_tune")

    def run(self, phases=PHASES):
        for phase in phases:
            if phase not in PHASES:
                raise ValueError(f"unknown phase {phase!r}")
            getattr(self, phase)()
        self.save_log()
        return self.model


# ---------------------------------------------------------------------------
# Diagnostics used by experiments and acceptance tests
# ---------------------------------------------------------------------------

def masked_fg_loss(model: AOFDModel, samples: list[Sample], policy: str,
                   fraction: float, rng, max_rois: int = 400) -> float:
    """Detector classification loss on masked foreground RoIs.

    ``policy`` is "generated" (the adversarial generator picks the cells)
    or "random" (equal-area random cells) — the comparison behind the
    adversarial-effectiveness check.
    """
    from .masks import ROI_CELLS, ROI_SIZE, binarize_lowest_k, mask_cell_count
    losses = []
    with torch.no_grad():
        for sample in samples:
            if len(losses) >= max_rois:
                break
            img = _image_tensor(sample.image)
            featmap = model.backbone(img)
            live = boxes_array([g.box for g in sample.annotations
                                if g.occlusion_state != "ignored"])
            if len(live) == 0:
                continue
            rois = roi_pool_batch(featmap, live, model.stride)
            for i in range(rois.shape[0]):
                roi = rois[i]
                if policy == "generated":
                    heat = model.generator(roi[None])
                    m = binarize_lowest_k(heat[0, 0].numpy(), fraction)
                else:
                    k = mask_cell_count(fraction)
                    m = np.ones(ROI_CELLS)
                    m[rng.permutation(ROI_CELLS)[:k]] = 0.0
                    m = m.reshape(ROI_SIZE, ROI_SIZE)
                masked = apply_mask(roi, m)
                logits, _ = model.heads(masked[None])
                losses.append(classification_loss(logits.numpy(), np.array([1])))
    return float(np.mean(losses)) if losses else float("nan")


def mean_generated_compactness(model: AOFDModel, samples: list[Sample],
                               fraction: float) -> float:
    """Mean rectified compact loss of hard generated masks on a batch."""
    from .masks import binarize_lowest_k
    vals = []
    with torch.no_grad():
        for sample in samples:
            img = _image_tensor(sample.image)
            featmap = model.backbone(img)
            live = boxes_array([g.box for g in sample.annotations
                                if g.occlusion_state != "ignored"])
            if len(live) == 0:
                continue
            rois = roi_pool_batch(featmap, live, model.stride)
            heat = model.generator(rois)
            for h in heat[:, 0]:
                vals.append(compact_loss(binarize_lowest_k(h.numpy(), fraction)))
    return float(np.mean(vals)) if vals else float("nan")
