"""
Assembled detector and the ablation variants.

    A   raw taps of L, no aggregation
    B   L through the additive FPN
    C   raw taps of I
    D   raw taps of R
    E   R through the additive FPN
    T2  decompose, shared extractor on I and R, multiplicative aggregation
"""

import logging
from typing import Dict, Optional, Sequence, Tuple

import torch
import torch.nn as nn

from src.exceptions import ConfigError
from src.models.aggregator import FeatureAggregator
from src.models.backbone import VGGBackbone
from src.models.heads import DetectionHead
from src.models.scene_decomposition import Decomposer, PrecomputedDecomposer, SceneDecompositionModule
from src.models.tensors import DecomposedScene, FeaturePyramid, HeadOutputs, validate_image
from src.schemas.config_schemas import (
    AnchorConfig,
    BatchNormStreamMode,
    DecomposerKind,
    ExperimentConfig,
    ModelConfig,
    Variant,
)
from src.services.anchor_service import AnchorSet, generate_anchors

logger = logging.getLogger(__name__)

# Which component image feeds the backbone for each variant.
VARIANT_STREAMS: Dict[Variant, Tuple[str, ...]] = {
    Variant.A: ("low_light",),
    Variant.B: ("low_light",),
    Variant.C: ("illumination",),
    Variant.D: ("reflectance",),
    Variant.E: ("reflectance",),
    Variant.T2: ("illumination", "reflectance"),
}
AGGREGATED_VARIANTS = (Variant.B, Variant.E, Variant.T2)


def parse_variant(tag) -> Variant:
    """Variant from a tag such as ``"T2"``; unknown tags are configuration errors."""
    if isinstance(tag, Variant):
        return tag
    try:
        return Variant(str(tag).upper())
    except ValueError:
        raise ConfigError(f"unknown variant '{tag}' (expected one of {[v.value for v in Variant]})") from None


def build_decomposer(config: ModelConfig) -> nn.Module:
    if config.decomposer == DecomposerKind.EXTERNAL:
        if not config.illumination_store:
            raise ConfigError("model.decomposer = external requires model.illumination_store")
        from src.services.illumination_store import PrecomputedDecompositionStore

        return PrecomputedDecomposer(PrecomputedDecompositionStore(config.illumination_store), config.eps_illumination)
    return SceneDecompositionModule(width=config.sdm_width, eps=config.eps_illumination)


class LowLightDetector(nn.Module):
    """Decomposer (optional), shared backbone, aggregator (optional) and heads."""

    def __init__(
        self,
        variant: Variant,
        model_config: Optional[ModelConfig] = None,
        anchor_config: Optional[AnchorConfig] = None,
    ):
        super().__init__()
        self.variant = variant
        self.model_config = model_config or ModelConfig()
        self.anchor_config = anchor_config or AnchorConfig()
        self.streams = VARIANT_STREAMS[variant]
        needs_decomposition = any(s != "low_light" for s in self.streams)
        self.decomposer = build_decomposer(self.model_config) if needs_decomposition else None
        self.freeze_decomposer = self.model_config.freeze_decomposer and isinstance(self.decomposer, nn.Module)
        if self.freeze_decomposer:
            for param in self.decomposer.parameters():
                param.requires_grad_(False)

        self.backbone = VGGBackbone(self.model_config.backbone_widths)
        if variant in AGGREGATED_VARIANTS:
            self.aggregator = FeatureAggregator(
                self.backbone.tap_channels,
                width=self.model_config.pyramid_width,
                streams=len(self.streams),
                upsample_mode=self.model_config.upsample_mode.value,
            )
            head_channels = [self.model_config.pyramid_width] * len(self.backbone.tap_channels)
        else:
            self.aggregator = None
            head_channels = self.backbone.tap_channels
        self.head = DetectionHead(
            head_channels,
            num_classes=self.model_config.num_classes,
            anchors_per_location=len(self.anchor_config.aspect_ratios),
        )
        self._anchor_cache: Dict[Tuple[int, int], AnchorSet] = {}

    @property
    def num_classes(self) -> int:
        return self.model_config.num_classes

    @property
    def uses_external_decomposer(self) -> bool:
        return isinstance(self.decomposer, PrecomputedDecomposer)

    def train(self, mode: bool = True) -> "LowLightDetector":
        super().train(mode)
        # A frozen decomposer keeps its running statistics.
        if self.freeze_decomposer:
            self.decomposer.eval()
        return self

    def anchors(self, height: int, width: int) -> AnchorSet:
        """Anchor layout matching the head output order for an input size."""
        key = (height, width)
        if key not in self._anchor_cache:
            self._anchor_cache[key] = generate_anchors(height, width, self.anchor_config)
        return self._anchor_cache[key]

    def decompose(self, images: torch.Tensor, image_ids: Optional[Sequence[str]] = None) -> Optional[DecomposedScene]:
        if self.decomposer is None:
            return None
        decomposer: Decomposer = self.decomposer
        if self.freeze_decomposer:
            with torch.no_grad():
                return decomposer.decompose_batch(images, image_ids)
        return decomposer.decompose_batch(images, image_ids)

    def extract_streams(self, inputs: Sequence[torch.Tensor]) -> Tuple[FeaturePyramid, ...]:
        """Run the shared backbone over each stream."""
        if len(inputs) == 1:
            return (self.backbone(inputs[0]),)
        if self.model_config.bn_stream_mode == BatchNormStreamMode.JOINT:
            n = inputs[0].shape[0]
            joint = self.backbone(torch.cat(list(inputs), dim=0))
            return tuple(
                FeaturePyramid([m.with_data(m.data[k * n:(k + 1) * n]) for m in joint])
                for k in range(len(inputs))
            )
        return tuple(self.backbone(x) for x in inputs)

    def run(
        self, images: torch.Tensor, image_ids: Optional[Sequence[str]] = None
    ) -> Tuple[HeadOutputs, Optional[DecomposedScene]]:
        """Forward pass returning head outputs and the decomposition (if any)."""
        images = validate_image(images)
        scene = self.decompose(images, image_ids)
        components = {"low_light": images}
        if scene is not None:
            components["illumination"] = scene.illumination
            components["reflectance"] = scene.reflectance
        pyramids = self.extract_streams([components[name] for name in self.streams])
        if self.aggregator is None:
            pyramid = pyramids[0]
        elif len(pyramids) == 2:
            pyramid = self.aggregator(pyramids[1], pyramids[0])
        else:
            pyramid = self.aggregator(pyramids[0])
        return self.head(pyramid), scene

    def forward(self, images: torch.Tensor, image_ids: Optional[Sequence[str]] = None) -> HeadOutputs:
        return self.run(images, image_ids)[0]


def build_model(variant, config: Optional[ExperimentConfig] = None) -> LowLightDetector:
    """Assemble the detector for an ablation variant tag."""
    config = config or ExperimentConfig()
    variant = parse_variant(variant)
    model = LowLightDetector(variant, config.model, config.anchors)
    num_params = sum(p.numel() for p in model.parameters())
    logger.debug("Built variant %s with %d parameters", variant.value, num_params)
    return model
