"""Flat declarative run configuration (``key = value``, one section per
concern) plus seed-precedence resolution: flag > AOFD_SEED env > config."""

from __future__ import annotations

import configparser
import os
from pathlib import Path

from .detector import AnchorConfig, ModelConfig
from .losses import LossWeights
from .synth import SceneSpec
from .training import TrainConfig

DEFAULT_CONFIG = """\
[data]
image_size = 128
train_size = 500
val_size = 100
test_size = 100
seg_size = 300
face_size_min = 28
face_size_max = 72
seed = 0

[model]
in_channels = 1
channels = 64
stride = 8
aspect_ratios = 1.7, 1.0, 1.3
scales = 256, 1024, 4096, 9216
proposal_nms_iou = 0.7
pre_nms_top_n = 1000
post_nms_top_n = 100

[train]
learning_rate = 0.001
generator_lr = 0.01
momentum = 0.9
batch_size = 1
roi_batch = 32
fg_fraction = 0.25
seed = 0

[phases]
pretrain_steps = 1000
generator_steps = 300
joint_seg_steps = 1000
joint_combined_steps = 5000
seg_tune_epochs = 3
seg_interleave = 4

[losses]
alpha = 1.0
beta = 1.0
mu = 1e-5
gamma = 1e-6
eta = 1.0
seg_overfit_mu = 1.0
combined_seg_mu = 1e-7

[masking]
generator_fraction = 0.25
joint_fraction = 0.333333333
use_masking = true
use_generator = true
use_segmentation = true
use_compact = true
"""


def write_default_config(path) -> None:
    Path(path).write_text(DEFAULT_CONFIG)


def load_config(path=None) -> dict:
    """Parse a config file into SceneSpec / ModelConfig / TrainConfig."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.read_string(DEFAULT_CONFIG)
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    data = parser["data"]
    model = parser["model"]
    train = parser["train"]
    phases = parser["phases"]
    losses = parser["losses"]
    masking = parser["masking"]
    size = data.getint("image_size")
    spec = SceneSpec(
        image_size=(size, size),
        face_size=(data.getfloat("face_size_min"), data.getfloat("face_size_max")),
        seed=data.getint("seed"),
    )
    model_cfg = ModelConfig(
        in_channels=model.getint("in_channels"),
        channels=model.getint("channels"),
        anchor=AnchorConfig(
            aspect_ratios=tuple(float(x) for x in model["aspect_ratios"].split(",")),
            scales=tuple(float(x) for x in model["scales"].split(",")),
            stride=model.getint("stride"),
        ),
        proposal_nms_iou=model.getfloat("proposal_nms_iou"),
        pre_nms_top_n=model.getint("pre_nms_top_n"),
        post_nms_top_n=model.getint("post_nms_top_n"),
    )
    weights = LossWeights(
        alpha=losses.getfloat("alpha"), beta=losses.getfloat("beta"),
        mu=losses.getfloat("mu"), gamma=losses.getfloat("gamma"),
        eta=losses.getfloat("eta"),
    )
    train_cfg = TrainConfig(
        seed=train.getint("seed"),
        learning_rate=train.getfloat("learning_rate"),
        generator_lr=train.getfloat("generator_lr"),
        momentum=train.getfloat("momentum"),
        batch_size=train.getint("batch_size"),
        roi_batch=train.getint("roi_batch"),
        fg_fraction=train.getfloat("fg_fraction"),
        weights=weights,
        generator_fraction=masking.getfloat("generator_fraction"),
        joint_fraction=masking.getfloat("joint_fraction"),
        pretrain_steps=phases.getint("pretrain_steps"),
        generator_steps=phases.getint("generator_steps"),
        joint_seg_steps=phases.getint("joint_seg_steps"),
        joint_combined_steps=phases.getint("joint_combined_steps"),
        seg_tune_epochs=phases.getint("seg_tune_epochs"),
        seg_interleave=phases.getint("seg_interleave"),
        seg_overfit_mu=losses.getfloat("seg_overfit_mu"),
        combined_seg_mu=losses.getfloat("combined_seg_mu"),
        use_masking=masking.getboolean("use_masking"),
        use_generator=masking.getboolean("use_generator"),
        use_segmentation=masking.getboolean("use_segmentation"),
        use_compact=masking.getboolean("use_compact"),
    )
    return {
        "scene_spec": spec,
        "sizes": (data.getint("train_size"), data.getint("val_size"),
                  data.getint("test_size")),
        "seg_size": data.getint("seg_size"),
        "model": model_cfg,
        "train": train_cfg,
    }


def resolve_seed(flag_seed, config_seed: int) -> int:
    """Seed precedence: command-line flag > AOFD_SEED env > config file."""
    if flag_seed is not None:
        return int(flag_seed)
    env = os.environ.get("AOFD_SEED")
    if env is not None:
        return int(env)
    return int(config_seed)
