"""What the adversarial mask generator learns to hide.

Trains a detector briefly, then trains the mask generator against it and
compares the classification damage of generated masks vs equal-area
random masks on held-out face RoIs. Also prints a few generated masks.

Run:  python3 demos/04_adversarial_masks.py
"""

import numpy as np
import torch

from aofd.detector import AOFDModel, ModelConfig, roi_pool_batch
from aofd.geometry import boxes_array
from aofd.masks import binarize_lowest_k
from aofd.synth import SceneSpec, make_benchmark
from aofd.training import (
    TrainConfig,
    Trainer,
    masked_fg_loss,
    scenes_to_samples,
)

FRACTION = 0.25

bench = make_benchmark(SceneSpec(seed=3), sizes=(150, 5, 40), seg_size=10)
cfg = TrainConfig(seed=3, pretrain_steps=600, generator_steps=300,
                  generator_fraction=FRACTION)
model = AOFDModel(ModelConfig(channels=32), seed=3)
trainer = Trainer(model, cfg,
                  scenes_to_samples(bench["train"], with_seg=False),
                  scenes_to_samples(bench["seg"], with_seg=True))
print("pretraining the detector ...")
trainer.pretrain_detector()
print("training the adversarial mask generator against it ...")
trainer.train_generator()
model.eval()

held_out = scenes_to_samples(bench["test"], with_seg=False)
rng = np.random.default_rng(0)
gen_loss = masked_fg_loss(model, held_out, "generated", FRACTION, rng)
rnd_loss = masked_fg_loss(model, held_out, "random", FRACTION, rng)
print(f"\nclassification loss on masked face RoIs (higher = more damage):")
print(f"  generated masks: {gen_loss:.4f}")
print(f"  random masks:    {rnd_loss:.4f}")
print("  -> the generator found cells that hurt more than chance"
      if gen_loss > rnd_loss else "  -> no adversarial advantage on this run")

print("\nexample generated masks ('#' = masked cell):")
shown = 0
with torch.no_grad():
    for sample in held_out:
        boxes = [a.box for a in sample.annotations
                 if a.occlusion_state != "ignored"]
        if not boxes:
            continue
        feat = model.backbone(torch.as_tensor(sample.image.astype(np.float32) / 255))
        rois = roi_pool_batch(feat, boxes_array(boxes), model.stride)
        heat = model.generator(rois)
        for h in heat[:, 0]:
            mask = binarize_lowest_k(h.numpy(), FRACTION)
            print("\n".join("  " + "".join(".#"[int(v == 0)] for v in row)
                            for row in mask))
            print()
            shown += 1
            if shown >= 3:
                break
        if shown >= 3:
            break
