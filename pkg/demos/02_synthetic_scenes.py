"""Gallery of synthetic occluded-face scenes.

Renders a handful of scenes from the moderate (train-style) and the
occlusion-heavy (test-style) distributions and writes a PNG contact
sheet plus the per-face occlusion states.

Run:  python3 demos/02_synthetic_scenes.py  [out.png]
"""

import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from aofd.synth import (
    OCCLUSION_HEAVY_COVERAGE,
    OCCLUSION_HEAVY_MIX,
    OCCLUSION_HEAVY_VALUE,
    SceneSpec,
    render_scene,
)

out_path = sys.argv[1] if len(sys.argv) > 1 else "scene_gallery.png"

train_spec = SceneSpec(seed=0)
test_spec = SceneSpec(seed=0, category_probs=OCCLUSION_HEAVY_MIX,
                      occluder_value=OCCLUSION_HEAVY_VALUE,
                      occluder_coverage=OCCLUSION_HEAVY_COVERAGE)

fig, axes = plt.subplots(2, 4, figsize=(12, 6.5))
for row, (name, spec) in enumerate((("train-style", train_spec),
                                    ("occlusion-heavy", test_spec))):
    for col in range(4):
        rng = np.random.default_rng([7, row, col])
        image, anns, mask = render_scene(spec, rng)
        ax = axes[row, col]
        ax.imshow(image, cmap="gray", vmin=0, vmax=255)
        ax.contour(mask, levels=[0.5], colors="red", linewidths=0.8)
        for a in anns:
            b = a.box
            color = {"masked": "red", "unmasked": "lime", "ignored": "gray"}[a.occlusion_state]
            ax.add_patch(plt.Rectangle((b.x1, b.y1), b.width, b.height,
                                       fill=False, edgecolor=color, linewidth=1.2))
        states = ", ".join(a.occlusion_state[:4] for a in anns)
        ax.set_title(f"{name}\n{states}", fontsize=8)
        ax.axis("off")
fig.tight_layout()
fig.savefig(out_path, dpi=110)
print(f"wrote {out_path}")
print("green = unmasked face, red = masked face (occlusion mask outlined),")
print("gray = ignored (tiny or almost fully covered)")
