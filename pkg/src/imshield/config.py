"""Run configuration: a human-readable YAML file mirroring the hyperparameters."""

import hashlib
import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import yaml

from .detectors import MaskPostprocessParams
from .training import HyperParams, TrainerConfig


@dataclass
class KDJpegSection:
    base: int = 16
    predictor_width: int = 16
    batch_size: int = 8
    predictor_lr: float = 1e-3
    predictor_epochs: int = 60
    generator_lr: float = 2e-4
    teacher_warmup_epochs: int = 3
    joint_epochs: int = 30


@dataclass
class PipelineConfig:
    resolution: int = 256
    seed: int = 0
    data_dir: str = ""
    donor_dir: str = ""            # defaults to data_dir when empty
    kdjpeg_checkpoint: str = ""    # required by the pipeline trainer
    steps_stage1: int = 2000
    steps_stage2: int = 1000
    checkpoint_every: int = 500
    inn_hidden: int = 32
    detector_base: int = 32
    d_a_ndf: int = 16
    d_b_base: int = 32
    hp: HyperParams = field(default_factory=HyperParams)
    mask_postprocess: MaskPostprocessParams = field(default_factory=MaskPostprocessParams)
    kdjpeg: KDJpegSection = field(default_factory=KDJpegSection)

    def __post_init__(self):
        if self.resolution % 8:
            raise ValueError(f"resolution must be divisible by 8; got {self.resolution}")

    def trainer_config(self) -> TrainerConfig:
        return TrainerConfig(
            hp=self.hp, mask_params=self.mask_postprocess, seed=self.seed,
            inn_hidden=self.inn_hidden, detector_base=self.detector_base,
            d_a_ndf=self.d_a_ndf, d_b_base=self.d_b_base,
            checkpoint_every=self.checkpoint_every)


def _coerce(section_cls, data):
    if isinstance(data, section_cls):
        return data
    fields = {f for f in section_cls.__dataclass_fields__}
    unknown = set(data) - fields
    if unknown:
        raise ValueError(f"unknown {section_cls.__name__} keys: {sorted(unknown)}")
    coerced = {}
    for key, value in data.items():
        coerced[key] = tuple(value) if isinstance(value, list) else value
    return section_cls(**coerced)


def load_config(path, check_paths: bool = True) -> PipelineConfig:
    """Parse and validate a YAML config file."""
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    for section, cls in (("hp", HyperParams), ("mask_postprocess", MaskPostprocessParams),
                         ("kdjpeg", KDJpegSection)):
        if section in raw:
            raw[section] = _coerce(cls, raw[section])
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    cfg = PipelineConfig(**raw)
    if check_paths:
        for name in ("data_dir", "donor_dir", "kdjpeg_checkpoint"):
            value = getattr(cfg, name)
            if value and not Path(value).exists():
                raise FileNotFoundError(f"{name} does not exist: {value}")
    return cfg


def config_hash(cfg: PipelineConfig) -> str:
    """Stable digest of the full configuration (resume safety check)."""
    blob = json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


EXAMPLE_CONFIG = """\
# imshield pipeline configuration (YAML)
# Paths are resolved relative to the working directory.

resolution: 256          # model input side; images are resized + center-cropped
seed: 0                  # master seed: training batches and attack sampling
data_dir: data/train     # directory of training images (png/bmp/jpg)
donor_dir: ""            # splice donor pool; empty = reuse data_dir
kdjpeg_checkpoint: models/kdjpeg.pt   # required before pipeline training

steps_stage1: 2000       # decoupled stage: detector alone + rest with GT masks
steps_stage2: 1000       # joint stage: recovery sees predicted masks
checkpoint_every: 500    # trainer checkpoint interval (steps)

# network widths (defaults follow the shipped models)
inn_hidden: 32           # coupling-subnet width of the immunizer network
detector_base: 32        # leading width of the detector U-net
d_a_ndf: 16              # patch-discriminator width
d_b_base: 16             # pixel-discriminator U-net width

hp:                      # loss weights and training constants
  alpha: 3.0             # protection-loss weight
  beta: 0.001            # localization-loss weight
  gamma: 10.0            # null-channel-loss weight
  omega: 0.01            # adversarial-loss weight
  epsilon: 0.1           # CE weight inside the JPEG-simulator losses
  lr: 0.0001             # Adam learning rate (cosine-annealed)
  lr_floor: 0.000001     # cosine floor
  batch_size: 4          # pre-expansion batch size n (backward sees 6n)
  r_aug: 0.15            # pre-tampering augmentation rate
  false_alarm_probability: 0.1   # fraction of plans with no tampering
  stage1_alpha_zero_on: prt      # stage-1 reading: "prt" or "rec"

mask_postprocess:        # prediction-mask cleanup
  threshold: 0.2
  erode_kernel: 8
  dilate_kernel: 16

kdjpeg:                  # JPEG-simulator pre-training (train-kdjpeg command)
  base: 16               # generator U-net width
  predictor_width: 16    # QF-predictor trunk width
  batch_size: 8
  predictor_lr: 0.001
  predictor_epochs: 60
  generator_lr: 0.0002
  teacher_warmup_epochs: 3
  joint_epochs: 30
"""
