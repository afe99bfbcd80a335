"""Occlusion-aware face detection at desk scale.

Adversarially generated RoI masks, a compactness-constrained mask loss,
a box-gated occlusion segmentation branch, a phased training pipeline,
a procedural occluded-face dataset, and oracle-checked detection metrics.
"""

__version__ = "0.1.0"

from .geometry import (
    Annotation,
    BoundingBox,
    Detection,
    enlarge_box,
    iou,
    rect_to_square,
)
from .losses import LossWeights, compact_loss, generator_loss, total_loss
from .masks import (
    MaskGenerator,
    MaskType,
    apply_mask,
    binarize_lowest_k,
    half_mask,
    random_drop_mask,
    sample_mask_type,
)
from .detector import AnchorConfig, AOFDModel, ModelConfig, generate_anchors
from .evaluation import EvalReport, average_precision, evaluate, match_detections, recall_at_fp
from .synth import SceneSpec, make_benchmark, read_dataset, render_scene, write_dataset
from .training import TrainConfig, Trainer
