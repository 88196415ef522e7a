"""
Pydantic schemas for experiment configuration.

An experiment is described by one ``ExperimentConfig`` made of flat sections.
Every field has a default so an empty config file is a valid experiment.
"""

import json
import math
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator


class Variant(str, Enum):
    """Detector variants of the ablation table."""
    A = "A"
    B = "B"
    C = "C"
    D = "D"
    E = "E"
    T2 = "T2"


VARIANT_DESCRIPTIONS: Dict[Variant, str] = {
    Variant.A: "raw taps of L (no aggregation)",
    Variant.B: "L through additive FPN",
    Variant.C: "I-only taps",
    Variant.D: "R-only taps",
    Variant.E: "R through additive FPN",
    Variant.T2: "decompose + shared extractor + multiplicative aggregation",
}


class OptimizerName(str, Enum):
    """Supported optimizers."""
    SGD = "sgd"
    ADAM = "adam"


class UpsampleMode(str, Enum):
    """Upsampling operator of the top-down pathway."""
    NEAREST = "nearest"
    BILINEAR = "bilinear"


class BatchNormStreamMode(str, Enum):
    """How the illumination and reflectance streams share batch statistics."""
    JOINT = "joint"
    SEPARATE = "separate"


class DecomposerKind(str, Enum):
    """Source of the illumination/reflectance split."""
    LEARNED = "learned"
    EXTERNAL = "external"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", use_enum_values=False)


class SynthConfig(_Section):
    """Synthetic low-light corpus parameters."""

    seed: int = Field(default=0, ge=0)
    height: int = Field(default=128, ge=32)
    width: int = Field(default=128, ge=32)
    num_train: int = Field(default=800, ge=0)
    num_val: int = Field(default=100, ge=0)
    num_test: int = Field(default=100, ge=0)
    min_objects: int = Field(default=1, ge=1, le=8)
    max_objects: int = Field(default=8, ge=1, le=8)
    size_min: int = Field(default=10, ge=4)
    size_max: int = Field(default=48, ge=4)
    max_overlap: float = Field(default=0.5, ge=0.0, le=1.0)
    darkness_min: float = Field(default=0.08, gt=0.0, le=1.0)
    darkness_max: float = Field(default=0.35, gt=0.0, le=1.0)
    illumination_min: float = Field(default=0.02, gt=0.0, le=1.0)
    illumination_max: float = Field(default=1.0, gt=0.0, le=1.0)
    num_lobes: int = Field(default=4, ge=0)
    lobe_sigma_min: float = Field(default=0.25, gt=0.0, description="Fraction of the canvas size")
    lobe_sigma_max: float = Field(default=0.6, gt=0.0, description="Fraction of the canvas size")
    max_gradient: float = Field(default=0.05, gt=0.0, description="Bound on per-pixel illumination change")
    noise_sigma: float = Field(default=0.01, ge=0.0)
    store_raw: bool = True


class DataConfig(_Section):
    """Dataset location and augmentation."""

    root: Optional[str] = None
    train_split: str = "train"
    val_split: str = "val"
    test_split: str = "test"
    augment: bool = True
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    crop_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    crop_min_scale: float = Field(default=0.6, gt=0.0, le=1.0)
    num_workers: int = Field(default=0, ge=0)


class ModelConfig(_Section):
    """Architecture of the detector."""

    num_classes: int = Field(default=4, ge=1)
    sdm_width: int = Field(default=32, ge=1)
    eps_illumination: float = Field(default=1e-4, gt=0.0, lt=1.0)
    backbone_widths: Tuple[int, int, int, int, int, int, int, int] = (16, 32, 64, 64, 96, 96, 128, 128)
    pyramid_width: int = Field(default=64, ge=1)
    upsample_mode: UpsampleMode = UpsampleMode.NEAREST
    bn_stream_mode: BatchNormStreamMode = BatchNormStreamMode.JOINT
    decomposer: DecomposerKind = DecomposerKind.LEARNED
    freeze_decomposer: bool = False
    illumination_store: Optional[str] = None

    @field_validator("backbone_widths")
    @classmethod
    def validate_widths(cls, v):
        """Every block must have at least one channel."""
        if any(w < 1 for w in v):
            raise ValueError("backbone widths must be positive")
        return v


class AnchorConfig(_Section):
    """Anchor layout and ground-truth matching."""

    aspect_ratios: List[float] = Field(default_factory=lambda: [1.0])
    scale_factor: float = Field(default=4.0, gt=0.0, description="Anchor size as a multiple of the stride")
    iou_threshold: float = Field(default=0.3, gt=0.0, le=1.0)
    ignore_iou: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    variances: Tuple[float, float] = (0.1, 0.2)

    @field_validator("aspect_ratios")
    @classmethod
    def validate_ratios(cls, v):
        """Ratios are positive width:height values."""
        if not v or any(r <= 0 for r in v):
            raise ValueError("aspect ratios must be a non-empty list of positive numbers")
        return v


class LossConfig(_Section):
    """Detection loss weights."""

    alpha: float = Field(default=1.0, ge=0.0, description="Localization weight")
    gamma: float = Field(default=2.0, ge=0.0)
    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    neg_pos_ratio: float = Field(default=3.0, gt=0.0, description="inf disables mining")
    min_negatives: int = Field(default=16, ge=0)


class TrainConfig(_Section):
    """Optimization schedule."""

    variant: Variant = Variant.T2
    optimizer: OptimizerName = OptimizerName.SGD
    learning_rate: float = Field(default=5e-4, ge=0.0)
    momentum: float = Field(default=0.9, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=5e-4, ge=0.0)
    batch_size: int = Field(default=4, ge=1)
    epochs: int = Field(default=30, ge=1)
    warmup_steps: int = Field(default=100, ge=0)
    resize: int = Field(default=128, ge=128)
    seed: int = Field(default=0, ge=0)
    max_steps: Optional[int] = Field(default=None, ge=1)
    overfit_batch: bool = False
    eval_every: int = Field(default=5, ge=0, description="Epochs between validation runs, 0 disables")
    log_every: int = Field(default=10, ge=1)

    @field_validator("resize")
    @classmethod
    def validate_resize(cls, v):
        """Inputs must tile the coarsest stride."""
        if v % 128:
            raise ValueError("resize must be a multiple of 128")
        return v


class EvalConfig(_Section):
    """Post-processing and metrics."""

    nms_overlap: float = Field(default=0.3, gt=0.0, le=1.0)
    keep_top: int = Field(default=750, ge=1)
    pre_nms_top_k: int = Field(default=1000, ge=1)
    score_threshold_pre_nms: float = Field(default=0.05, ge=0.0, le=1.0)
    iou_threshold: float = Field(default=0.5, gt=0.0, le=1.0)
    score_threshold: float = Field(default=0.0, ge=0.0, le=1.0)
    test_resize: Optional[int] = Field(default=128, ge=128)
    ablation_seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])

    @field_validator("test_resize")
    @classmethod
    def validate_test_resize(cls, v):
        if v is not None and v % 128:
            raise ValueError("test_resize must be a multiple of 128")
        return v

    @field_validator("ablation_seeds")
    @classmethod
    def validate_seeds(cls, v):
        if not v:
            raise ValueError("at least one ablation seed is required")
        return v


class ExperimentConfig(_Section):
    """Complete experiment description."""

    synth: SynthConfig = Field(default_factory=SynthConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    anchors: AnchorConfig = Field(default_factory=AnchorConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def to_flat(self) -> str:
        """Render the config in the flat ``section.key = value`` file format."""
        lines = []
        for section_name in type(self).model_fields:
            section = getattr(self, section_name)
            for key in type(section).model_fields:
                lines.append(f"{section_name}.{key} = {format_config_value(getattr(section, key))}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: Dict[str, Any]) -> "ExperimentConfig":
        """Return a copy with flat-key overrides applied and re-validated."""
        data = self.model_dump()
        for path, value in overrides.items():
            section, key = path.split(".", 1)
            data.setdefault(section, {})[key] = value
        return ExperimentConfig.model_validate(data)


def format_config_value(value: Any) -> str:
    """Serialize one config value for the flat file format."""
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, str):
        return value
    if isinstance(value, float) and math.isinf(value):
        return "inf" if value > 0 else "-inf"
    if isinstance(value, tuple):
        value = list(value)
    return json.dumps(value)
