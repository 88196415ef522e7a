"""
Tensor carriers passed between the detector stages, and image validation.
"""

from dataclasses import dataclass
from typing import Iterator, List, Sequence, Tuple

import torch

from src.exceptions import DataValidationError

MAX_STRIDE = 128
MIN_SIDE = 32

# Pyramid levels and the conv layer tapped inside each block.
PYRAMID_LEVELS: Tuple[int, ...] = (3, 4, 5, 6, 7, 8)
LAYER_TAGS: Tuple[int, ...] = (3, 3, 3, 2, 2, 2)


def level_stride(level: int) -> int:
    """Stride in pixels of a pyramid level."""
    return 2 ** (level - 1)


def validate_image(images: torch.Tensor, require_divisible: bool = True) -> torch.Tensor:
    """Check ImageTensor invariants and return a batched ``(N, 3, H, W)`` view."""
    if images.dim() == 3:
        images = images.unsqueeze(0)
    if images.dim() != 4 or images.shape[1] != 3:
        raise DataValidationError(f"expected a 3-channel image, got shape {tuple(images.shape)}")
    if not torch.isfinite(images).all():
        raise DataValidationError("image contains non-finite values")
    if images.numel() and (images.min() < 0 or images.max() > 1):
        raise DataValidationError(
            f"image values must lie in [0, 1], got [{images.min().item():.4g}, {images.max().item():.4g}]"
        )
    validate_spatial(images.shape[-2], images.shape[-1], require_divisible)
    return images


def validate_spatial(height: int, width: int, require_divisible: bool = True) -> None:
    """Check the spatial size precondition shared by all stages."""
    if height < MIN_SIDE or width < MIN_SIDE:
        raise DataValidationError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}")
    if require_divisible and (height % MAX_STRIDE or width % MAX_STRIDE):
        raise DataValidationError(
            f"image size {height}x{width} is not divisible by the largest stride {MAX_STRIDE}"
        )


@dataclass
class DecomposedScene:
    """Illumination and reflectance with ``reflectance * illumination == source``."""

    illumination: torch.Tensor
    reflectance: torch.Tensor
    eps: float

    def reconstruct(self) -> torch.Tensor:
        return self.reflectance * self.illumination


@dataclass
class FeatureMap:
    """One pyramid level: ``data`` is ``(N, C, H / stride, W / stride)``."""

    level: int
    layer_tag: int
    stride: int
    data: torch.Tensor

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def spatial(self) -> Tuple[int, int]:
        return tuple(self.data.shape[-2:])

    def with_data(self, data: torch.Tensor) -> "FeatureMap":
        return FeatureMap(self.level, self.layer_tag, self.stride, data)


class FeaturePyramid(Sequence[FeatureMap]):
    """Exactly six feature maps at levels 3..8, finest first."""

    def __init__(self, maps: Sequence[FeatureMap]):
        maps = list(maps)
        levels = tuple(m.level for m in maps)
        if levels != PYRAMID_LEVELS:
            raise DataValidationError(f"pyramid must hold levels {PYRAMID_LEVELS}, got {levels}")
        for m in maps:
            if m.stride != level_stride(m.level):
                raise DataValidationError(f"level {m.level} has stride {m.stride}, expected {level_stride(m.level)}")
        self._maps: List[FeatureMap] = maps

    def __getitem__(self, index):
        return self._maps[index]

    def __len__(self) -> int:
        return len(self._maps)

    def __iter__(self) -> Iterator[FeatureMap]:
        return iter(self._maps)

    def level(self, level: int) -> FeatureMap:
        return self._maps[PYRAMID_LEVELS.index(level)]

    @property
    def tensors(self) -> List[torch.Tensor]:
        return [m.data for m in self._maps]

    @property
    def channels(self) -> List[int]:
        return [m.channels for m in self._maps]

    @classmethod
    def from_tensors(cls, tensors: Sequence[torch.Tensor], tags: Sequence[int] = LAYER_TAGS) -> "FeaturePyramid":
        """Wrap six tensors ordered finest first."""
        return cls(
            FeatureMap(level, tag, level_stride(level), t)
            for level, tag, t in zip(PYRAMID_LEVELS, tags, tensors)
        )


@dataclass
class HeadOutputs:
    """Per-anchor logits ``(N, A, K + 1)`` and regressions ``(N, A, 4)``."""

    class_logits: torch.Tensor
    box_regression: torch.Tensor

    @property
    def num_anchors(self) -> int:
        return self.class_logits.shape[1]
