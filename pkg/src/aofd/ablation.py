"""Ablation runner: train variants, evaluate, and tabulate the results."""

from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import numpy as np

from .detector import AOFDModel, ModelConfig
from .evaluation import EvalReport, evaluate
from .training import Sample, TrainConfig, Trainer, scenes_to_samples

VARIANTS = ("full", "baseline", "no_gen", "no_seg", "no_compact",
            "frac_1_6", "frac_1_4", "frac_1_3", "frac_1_2")

FRACTIONS = {"frac_1_6": 1 / 6, "frac_1_4": 1 / 4, "frac_1_3": 1 / 3,
             "frac_1_2": 1 / 2}


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    """Translate a variant name into config toggles."""
    if variant == "full":
        return base
    if variant == "baseline":
        # plain detector: no masking strategy, no segmentation branch
        return replace(base, use_masking=False, use_generator=False,
                       use_segmentation=False)
    if variant == "no_gen":
        # the adversarial generator anchors the whole masking strategy
        # ("mask facilitates detecting"); ablating it turns masking off
        return replace(base, use_masking=False, use_generator=False)
    if variant == "no_seg":
        return replace(base, use_segmentation=False)
    if variant == "no_compact":
        return replace(base, use_compact=False)
    if variant in FRACTIONS:
        return replace(base, joint_fraction=FRACTIONS[variant])
    raise ValueError(f"unknown ablation variant {variant!r}")


def train_variant(variant: str, base_cfg: TrainConfig, model_cfg: ModelConfig,
                  train_scenes, seg_scenes, seed: int, out_dir=None) -> AOFDModel:
    """Run the full five-phase schedule for one variant."""
    cfg = replace(variant_config(base_cfg, variant), seed=seed)
    model = AOFDModel(model_cfg, seed=seed,
                      with_generator=cfg.use_generator,
                      with_segmentation=cfg.use_segmentation)
    trainer = Trainer(model, cfg,
                      scenes_to_samples(train_scenes, with_seg=False),
                      scenes_to_samples(seg_scenes, with_seg=True),
                      out_dir=out_dir)
    trainer.run()
    model.eval()
    return model


def evaluate_model(model: AOFDModel, test_scenes, iou_threshold: float = 0.5,
                   score_threshold: float = 0.05) -> dict[str, EvalReport]:
    """Run inference on the test split and evaluate the standard protocols."""
    dets, gts = [], []
    for scene in test_scenes:
        dets.append(model.infer(scene.image, score_threshold=score_threshold))
        gts.append(list(scene.annotations))
    return {
        subset: evaluate(dets, gts, subset_filter=subset,
                         iou_threshold=iou_threshold)
        for subset in ("non_ignored", "masked_only", "all")
    }


def run_ablation(variants, base_cfg: TrainConfig, model_cfg: ModelConfig,
                 train_scenes, seg_scenes, test_scenes, out_dir,
                 seeds=(0,)) -> dict:
    """Train and evaluate every requested variant; write a report.

    Per variant: one row per seed with AP (masked subset and without
    ignored) plus recall at the FP budgets, and a PR-points file.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown ablation variant {v!r}")
    rows = []
    for variant in variants:
        for seed in seeds:
            run_dir = out_dir / f"{variant}_seed{seed}"
            model = train_variant(variant, base_cfg, model_cfg,
                                  train_scenes, seg_scenes, seed, out_dir=run_dir)
            reports = evaluate_model(model, test_scenes)
            masked = reports["masked_only"]
            overall = reports["non_ignored"]
            masked.save(run_dir / "eval_masked_only.json")
            overall.save(run_dir / "eval_non_ignored.json")
            masked.save_pr_points(run_dir / "pr_masked_only.txt")
            overall.save_pr_points(run_dir / "pr_non_ignored.txt")
            rows.append({
                "variant": variant, "seed": seed,
                "ap_masked": masked.ap, "ap_non_ignored": overall.ap,
                "recall_at_fp": overall.recall_at_fp,
            })
    table = format_table(rows)
    report = {"rows": rows, "table": table}
    (out_dir / "ablation_report.json").write_text(json.dumps(report, indent=2))
    (out_dir / "ablation_table.txt").write_text(table + "\n")
    return report


def format_table(rows) -> str:
    header = f"{'variant':<12} {'seed':>4} {'AP(masked)':>12} {'AP(w/o ign)':>12} {'recall@FP':>24}"
    lines = [header, "-" * len(header)]
    for r in rows:
        ap_m = "n/a" if r["ap_masked"] is None else f"{r['ap_masked']:.9g}"
        ap_o = "n/a" if r["ap_non_ignored"] is None else f"{r['ap_non_ignored']:.9g}"
        rfp = " ".join(f"{k}:{v:.3f}" for k, v in sorted(r["recall_at_fp"].items()))
        lines.append(f"{r['variant']:<12} {r['seed']:>4} {ap_m:>12} {ap_o:>12} {rfp:>24}")
    return "\n".join(lines)


def median_ap(rows, variant: str, key: str = "ap_masked") -> float:
    vals = [r[key] for r in rows if r["variant"] == variant and r[key] is not None]
    if not vals:
        raise ValueError(f"no AP values for variant {variant!r}")
    return float(np.median(vals))
