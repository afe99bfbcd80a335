"""Detection metrics: ignore-aware matching, AP, recall at FP budgets.

Matching is greedy in score order; ground truth labeled ignored (or
outside the evaluated subset, e.g. unmasked faces under the masked-only
protocol) absorbs detections into an IGNORED disposition that counts
neither as true nor as false positive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Annotation, Detection, iou, rect_to_square

TP, FP, IGNORED = "TP", "FP", "IGNORED"

SUBSET_FILTERS = ("all", "masked_only", "non_ignored")
DEFAULT_FP_COUNTS = (10, 50, 100)


@dataclass
class MatchResult:
    """Per-detection dispositions against one image's ground truth."""

    dispositions: list[str]
    scores: list[float]
    gt_matched: list[bool]
    num_gt: int              # targets in the evaluated subset
    iou_threshold: float


def _is_target(ann: Annotation, subset_filter: str) -> bool:
    if subset_filter == "all":
        return True
    if subset_filter == "non_ignored":
        return ann.occlusion_state != "ignored"
    if subset_filter == "masked_only":
        return ann.occlusion_state == "masked"
    raise ValueError(f"unknown subset filter {subset_filter!r}")


def match_detections(dets: list[Detection], gts: list[Annotation],
                     iou_threshold: float = 0.5,
                     subset_filter: str = "non_ignored") -> MatchResult:
    """Greedily match score-sorted detections to ground truth.

    Each target gt is matched at most once (highest-IoU unmatched target
    above the threshold wins).  A detection whose only above-threshold
    overlap is a non-target gt is IGNORED; non-target gts absorb any
    number of detections.
    """
    scores = [d.score for d in dets]
    if any(scores[i] < scores[i + 1] for i in range(len(scores) - 1)):
        raise ValueError("detections must be sorted by descending score")
    if subset_filter not in SUBSET_FILTERS:
        raise ValueError(f"unknown subset filter {subset_filter!r}")
    targets = [g for g in gts if _is_target(g, subset_filter)]
    others = [g for g in gts if not _is_target(g, subset_filter)]
    matched = [False] * len(targets)
    dispositions = []
    for d in dets:
        best_iou, best_j = 0.0, -1
        for j, g in enumerate(targets):
            if matched[j]:
                continue
            v = iou(d.box, g.box)
            if v >= iou_threshold and v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0:
            matched[best_j] = True
            dispositions.append(TP)
            continue
        if any(iou(d.box, g.box) >= iou_threshold for g in others):
            dispositions.append(IGNORED)
        else:
            dispositions.append(FP)
    return MatchResult(dispositions=dispositions, scores=scores,
                       gt_matched=matched, num_gt=len(targets),
                       iou_threshold=iou_threshold)


def _threshold_sweep(dispositions, scores):
    """Cumulative (threshold, tp, fp) at each distinct score, descending.

    Tied scores form one sweep point: a score threshold can only admit or
    reject a tie group as a whole.  IGNORED entries are dropped first.
    """
    pairs = [(s, d) for s, d in zip(scores, dispositions) if d != IGNORED]
    pairs.sort(key=lambda p: -p[0])
    sweep = []
    tp = fp = 0
    for i, (s, d) in enumerate(pairs):
        tp += d == TP
        fp += d == FP
        if i + 1 == len(pairs) or pairs[i + 1][0] != s:
            sweep.append((s, tp, fp))
    return sweep


def average_precision(dispositions: list[str], scores: list[float],
                      num_gt: int) -> float:
    """Area under the PR curve with all-point (envelope) interpolation."""
    if num_gt <= 0:
        raise ValueError("AP undefined: no ground truth in the evaluated subset")
    sweep = _threshold_sweep(dispositions, scores)
    if not sweep:
        return 0.0
    recall = np.array([tp / num_gt for _, tp, _ in sweep])
    precision = np.array([tp / max(tp + fp, 1) for _, tp, fp in sweep])
    # precision envelope: best precision achievable at recall >= r
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def recall_at_fp(dispositions: list[str], scores: list[float], num_gt: int,
                 fp_counts=DEFAULT_FP_COUNTS) -> dict[int, float]:
    """Recall at the loosest score threshold admitting <= N false positives."""
    sweep = _threshold_sweep(dispositions, scores)
    out = {}
    for budget in fp_counts:
        best = 0.0
        for _, tp, fp in sweep:
            if fp > budget:
                break
            best = tp / num_gt if num_gt > 0 else 0.0
        out[int(budget)] = float(best)
    return out


@dataclass
class EvalReport:
    """Evaluation summary for one protocol."""

    subset: str
    box_form: str
    iou_threshold: float
    num_gt: int
    num_detections: int
    ap: float | None
    recall_at_fp: dict[int, float]
    pr_points: list[tuple[float, float, float]]   # (precision, recall, score)
    flags: list[str] = field(default_factory=list)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["pr_points"] = [list(p) for p in self.pr_points]
        return json.dumps(d, indent=2)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    def save_pr_points(self, path) -> None:
        """Two-column (recall, precision) plain text for external plotting."""
        lines = [f"{r:.9g} {p:.9g}" for p, r, _ in self.pr_points]
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        d["pr_points"] = [tuple(p) for p in d["pr_points"]]
        d["recall_at_fp"] = {int(k): v for k, v in d["recall_at_fp"].items()}
        return cls(**d)


def evaluate(dets_per_image: list[list[Detection]],
             gts_per_image: list[list[Annotation]],
             subset_filter: str = "non_ignored", box_form: str = "rect",
             iou_threshold: float = 0.5,
             fp_counts=DEFAULT_FP_COUNTS) -> EvalReport:
    """Match every image, pool the sweep, and compute AP / recall@FP.

    ``box_form="square"`` converts detection boxes with the same
    center-preserving rule used for square-annotated benchmarks before
    matching.
    """
    if box_form not in ("rect", "square"):
        raise ValueError(f"unknown box form {box_form!r}")
    if subset_filter not in SUBSET_FILTERS:
        raise ValueError(f"unknown subset filter {subset_filter!r}")
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth must align per image")
    all_disp, all_scores = [], []
    num_gt = 0
    flags = []
    for dets, gts in zip(dets_per_image, gts_per_image):
        dets = sorted(dets, key=lambda d: -d.score)
        if box_form == "square":
            dets = [Detection(rect_to_square(d.box), d.score) for d in dets]
        m = match_detections(dets, gts, iou_threshold, subset_filter)
        all_disp.extend(m.dispositions)
        all_scores.extend(m.scores)
        num_gt += m.num_gt
    pr_points = []
    if num_gt > 0:
        for s, tp, fp in _threshold_sweep(all_disp, all_scores):
            pr_points.append((tp / max(tp + fp, 1), tp / num_gt, s))
    if num_gt == 0:
        ap = None
        flags.append("undefined_ap_no_ground_truth")
        rfp = {int(b): 0.0 for b in fp_counts}
    else:
        ap = average_precision(all_disp, all_scores, num_gt)
        rfp = recall_at_fp(all_disp, all_scores, num_gt, fp_counts)
    return EvalReport(subset=subset_filter, box_form=box_form,
                      iou_threshold=iou_threshold, num_gt=num_gt,
                      num_detections=len(all_disp), ap=ap,
                      recall_at_fp=rfp, pr_points=pr_points, flags=flags)
