"""Command-line entry point: generate / train / eval / visualize / ablate.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal invariant
violation.  Every run directory receives exactly one append-only
``manifest.json`` recording the command, config snapshot, seed, and
outputs.  Seed precedence: --seed flag > AOFD_SEED env > config file.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .ablation import VARIANTS, run_ablation
from .config import load_config, resolve_seed, write_default_config
from .detector import load_checkpoint
from .evaluation import evaluate
from .synth import (
    SceneRecord,
    export_coco_like,
    load_image,
    load_mask,
    make_benchmark,
    read_dataset,
    write_dataset,
)
from .training import Trainer, PHASES, scenes_to_samples
from .visualize import render_scene_overlays

USAGE_ERROR, DATA_ERROR, INTERNAL_ERROR = 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def write_manifest(out_dir: Path, command: str, config_snapshot: dict,
                   seed: int, outputs: list[str], elapsed: float) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "manifest.json"
    entries = []
    if path.exists():
        entries = json.loads(path.read_text())
    entries.append({
        "command": command,
        "version": __version__,
        "config": config_snapshot,
        "seed": seed,
        "outputs": outputs,
        "elapsed_seconds": round(elapsed, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    })
    path.write_text(json.dumps(entries, indent=2))


def load_split_scenes(dataset_dir, split: str) -> list[SceneRecord]:
    root = Path(dataset_dir) / split
    records = read_dataset(root)
    scenes = []
    for rec in records:
        scenes.append(SceneRecord(image=load_image(root, rec),
                                  annotations=list(rec.annotations),
                                  mask=load_mask(root, rec), split=rec.split))
    return scenes


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise UsageError(f"output directory {out} is not empty (use --force)")
    seed = resolve_seed(args.seed, cfg["scene_spec"].seed)
    spec = dataclasses.replace(cfg["scene_spec"], seed=seed)
    seg_size = args.scarce_seg if args.scarce_seg is not None else cfg["seg_size"]
    splits = make_benchmark(spec, cfg["sizes"], seg_size=seg_size)
    outputs = []
    for split, scenes in splits.items():
        records = write_dataset(scenes, out / split)
        outputs.append(str(out / split))
        if args.export_coco_like:
            export_coco_like(records, out / split / "index_coco_like.json")
    write_manifest(out, "generate", {"sizes": list(cfg["sizes"]),
                                     "seg_size": seg_size,
                                     "image_size": list(spec.image_size)},
                   seed, outputs, time.time() - t0)
    print(f"dataset written to {out} "
          f"(train/val/test/seg = {'/'.join(str(len(s)) for s in splits.values())})")
    return 0


def cmd_train(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = resolve_seed(args.seed, cfg["train"].seed)
    train_cfg = dataclasses.replace(cfg["train"], seed=seed)
    det_scenes = load_split_scenes(args.dataset, "train")
    seg_scenes = load_split_scenes(args.dataset, "seg")
    if not det_scenes:
        raise DataError(f"no training images under {args.dataset}/train")
    if not seg_scenes:
        raise DataError(f"no segmentation images under {args.dataset}/seg")
    if args.phase:
        if args.phase not in PHASES:
            raise UsageError(f"unknown phase {args.phase!r}; choices: {PHASES}")
        idx = PHASES.index(args.phase)
        if idx == 0:
            from .detector import AOFDModel
            model = AOFDModel(cfg["model"], seed=seed,
                              with_generator=train_cfg.use_generator,
                              with_segmentation=train_cfg.use_segmentation)
        else:
            prev = out / f"{PHASES[idx - 1]}.ckpt"
            if not prev.exists():
                raise DataError(f"cannot run phase {args.phase!r}: prerequisite "
                                f"checkpoint for phase {PHASES[idx - 1]!r} missing ({prev})")
            model = load_checkpoint(prev)
        phases = (args.phase,)
    else:
        from .detector import AOFDModel
        model = AOFDModel(cfg["model"], seed=seed,
                          with_generator=train_cfg.use_generator,
                          with_segmentation=train_cfg.use_segmentation)
        phases = PHASES
    trainer = Trainer(model, train_cfg,
                      scenes_to_samples(det_scenes, with_seg=False),
                      scenes_to_samples(seg_scenes, with_seg=True),
                      out_dir=out)
    trainer.run(phases)
    outputs = [str(out / f"{p}.ckpt") for p in phases] + [str(out / "train_log.jsonl")]
    write_manifest(out, "train", train_cfg.to_dict(), seed, outputs, time.time() - t0)
    print(f"trained phases {', '.join(phases)}; checkpoints in {out}")
    return 0


def cmd_eval(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    scenes = load_split_scenes(args.dataset, args.split)
    if not scenes:
        raise DataError(f"no images under {args.dataset}/{args.split}")
    dets, gts = [], []
    for scene in scenes:
        dets.append(model.infer(scene.image, score_threshold=args.score_threshold))
        gts.append(list(scene.annotations))
    outputs = []
    for subset in args.protocol:
        report = evaluate(dets, gts, subset_filter=subset, box_form=args.box_form,
                          iou_threshold=args.iou)
        stem = f"eval_{subset}_{args.box_form}_iou{args.iou:g}"
        report.save(out / f"{stem}.json")
        report.save_pr_points(out / f"{stem}_pr.txt")
        _plot_pr(report, out / f"{stem}_pr.png")
        outputs += [str(out / f"{stem}.json"), str(out / f"{stem}_pr.png")]
        ap = "undefined" if report.ap is None else f"{report.ap:.9g}"
        print(f"{subset} ({args.box_form}, IoU {args.iou:g}): AP = {ap}, "
              f"gts = {report.num_gt}, flags = {report.flags}")
        if args.debug_dump:
            dump = [[d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.score]
                    for per_img in dets for d in per_img]
            (out / f"{stem}_detections.json").write_text(json.dumps(dump))
    write_manifest(out, "eval", {"checkpoint": str(args.checkpoint),
                                 "iou": args.iou, "box_form": args.box_form,
                                 "protocols": list(args.protocol)},
                   0, outputs, time.time() - t0)
    return 0


def _plot_pr(report, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 4))
    if report.pr_points:
        p, r, _ = zip(*report.pr_points)
        ax.plot(r, p, "-")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.05)
    ap = "n/a" if report.ap is None else f"{report.ap:.4f}"
    ax.set_title(f"{report.subset} / {report.box_form} / IoU {report.iou_threshold:g} (AP {ap})")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def cmd_visualize(args) -> int:
    t0 = time.time()
    from PIL import Image
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = load_checkpoint(args.checkpoint)
    skipped = 0
    outputs = []
    for img_path in args.images:
        try:
            image = np.asarray(Image.open(img_path).convert("L"), dtype=np.uint8)
        except Exception as exc:
            print(f"warning: skipping unreadable image {img_path}: {exc}", file=sys.stderr)
            skipped += 1
            continue
        box_img, seg_img, mask_img = render_scene_overlays(
            model, image, score_threshold=args.score_threshold)
        stem = Path(img_path).stem
        for name, arr in (("boxes", box_img), ("segmentation", seg_img),
                          ("roimasks", mask_img)):
            p = out / f"{stem}_{name}.png"
            Image.fromarray(arr).save(p)
            outputs.append(str(p))
    write_manifest(out, "visualize", {"checkpoint": str(args.checkpoint)},
                   0, outputs, time.time() - t0)
    print(f"wrote {len(outputs)} overlays, skipped {skipped} images")
    return 0


def cmd_ablate(args) -> int:
    t0 = time.time()
    cfg = load_config(args.config)
    out = Path(args.out)
    seed = resolve_seed(args.seed, cfg["train"].seed)
    train_scenes = load_split_scenes(args.dataset, "train")
    seg_scenes = load_split_scenes(args.dataset, "seg")
    test_scenes = load_split_scenes(args.dataset, "test")
    if not (train_scenes and seg_scenes and test_scenes):
        raise DataError(f"dataset {args.dataset} is missing train/seg/test splits")
    seeds = [seed + i for i in range(args.num_seeds)]
    report = run_ablation(args.variants, cfg["train"], cfg["model"],
                          train_scenes, seg_scenes, test_scenes, out, seeds=seeds)
    write_manifest(out, "ablate", {"variants": list(args.variants), "seeds": seeds},
                   seed, [str(out / "ablation_report.json")], time.time() - t0)
    print(report["table"])
    return 0


def cmd_write_config(args) -> int:
    write_default_config(args.out)
    print(f"default config written to {args.out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aofd",
                                description="Occlusion-aware face detection at desk scale")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic benchmark")
    g.add_argument("--config", default=None)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.add_argument("--seed", type=int, default=None)
    g.add_argument("--scarce-seg", type=int, default=None,
                   help="truncate the segmentation split to N images")
    g.add_argument("--export-coco-like", action="store_true")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run the training phases")
    t.add_argument("--config", default=None)
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--phase", default=None, choices=list(PHASES),
                   help="run a single phase, resuming from its prerequisite")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.add_argument("--protocol", nargs="+", default=["non_ignored"],
                   choices=["all", "masked_only", "non_ignored"])
    e.add_argument("--box-form", default="rect", choices=["rect", "square"])
    e.add_argument("--iou", type=float, default=0.5)
    e.add_argument("--score-threshold", type=float, default=0.05)
    e.add_argument("--debug-dump", action="store_true",
                   help="also dump the (possibly square-converted) detections")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("visualize", help="write overlay images")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--score-threshold", type=float, default=0.5)
    v.add_argument("images", nargs="+")
    v.set_defaults(func=cmd_visualize)

    a = sub.add_parser("ablate", help="train and compare ablation variants")
    a.add_argument("--config", default=None)
    a.add_argument("--dataset", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seed", type=int, default=None)
    a.add_argument("--num-seeds", type=int, default=1)
    a.add_argument("--variants", nargs="+", default=["full", "baseline"],
                   choices=list(VARIANTS))
    a.set_defaults(func=cmd_ablate)

    w = sub.add_parser("write-config", help="write the default config file")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_write_config)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else USAGE_ERROR
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return DATA_ERROR
    except (AssertionError, FloatingPointError, RuntimeError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return INTERNAL_ERROR


if __name__ == "__main__":
    sys.exit(main())
