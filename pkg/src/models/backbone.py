"""
Reduced-width VGG-style extractor shared by the illumination and reflectance streams.
"""

from typing import List, Sequence, Tuple

import torch
import torch.nn as nn

from src.models.scene_decomposition import conv_bn_relu
from src.models.tensors import LAYER_TAGS, PYRAMID_LEVELS, FeaturePyramid, validate_spatial

DEFAULT_WIDTHS: Tuple[int, ...] = (16, 32, 64, 64, 96, 96, 128, 128)
# Conv layers per block; blocks 3-5 follow VGG-16 so their third conv can be tapped.
CONVS_PER_BLOCK: Tuple[int, ...] = (2, 2, 3, 3, 3, 2, 2, 2)


class VGGBackbone(nn.Module):
    """Eight conv blocks separated by stride-2 max-pools, tapped at blocks 3..8."""

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, in_channels: int = 3):
        super().__init__()
        if len(widths) != len(CONVS_PER_BLOCK):
            raise ValueError(f"expected {len(CONVS_PER_BLOCK)} block widths, got {len(widths)}")
        self.widths = tuple(widths)
        self.blocks = nn.ModuleList()
        channels = in_channels
        for width, num_convs in zip(self.widths, CONVS_PER_BLOCK):
            layers = []
            for _ in range(num_convs):
                layers.append(conv_bn_relu(channels, width))
                channels = width
            self.blocks.append(nn.ModuleList(layers))
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)

    @property
    def tap_channels(self) -> List[int]:
        """Channel width of each tapped level, finest first."""
        return [self.widths[level - 1] for level in PYRAMID_LEVELS]

    def forward(self, x: torch.Tensor) -> FeaturePyramid:
        validate_spatial(x.shape[-2], x.shape[-1])
        taps = []
        for index, block in enumerate(self.blocks):
            block_number = index + 1
            if index > 0:
                x = self.pool(x)
            for layer_number, layer in enumerate(block, start=1):
                x = layer(x)
                if block_number in PYRAMID_LEVELS and layer_number == LAYER_TAGS[PYRAMID_LEVELS.index(block_number)]:
                    taps.append(x)
        return FeaturePyramid.from_tensors(taps)


def extract(component_image: torch.Tensor, backbone: VGGBackbone) -> FeaturePyramid:
    """Extract the six tap features of one component image or batch."""
    if component_image.dim() == 3:
        component_image = component_image.unsqueeze(0)
    return backbone(component_image)
