"""
Scene decomposition: split a low-light image into illumination and reflectance.

The network predicts only the illumination; reflectance is the exact quotient
``low_light / illumination`` so the Retinex identity holds by construction.
"""

import logging
from abc import ABC, abstractmethod
from typing import TYPE_CHECKING, Dict, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.exceptions import DataValidationError
from src.models.tensors import DecomposedScene, validate_image

if TYPE_CHECKING:
    from src.services.illumination_store import PrecomputedDecompositionStore

logger = logging.getLogger(__name__)

DEFAULT_EPS = 1e-4


def conv_bn_relu(in_channels: int, out_channels: int) -> nn.Sequential:
    """3x3 stride-1 conv followed by batch norm and ReLU."""
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=1, padding=1, bias=False),
        nn.BatchNorm2d(out_channels),
        nn.ReLU(inplace=False),
    )


class ResidualBlock(nn.Module):
    """Two Conv-BN-ReLU layers with an identity skip."""

    def __init__(self, width: int):
        super().__init__()
        self.body = nn.Sequential(conv_bn_relu(width, width), conv_bn_relu(width, width))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Decomposer(ABC):
    """Strategy interface for producing a ``DecomposedScene``."""

    eps: float

    @abstractmethod
    def decompose_batch(
        self, low_light: torch.Tensor, image_ids: Optional[Sequence[str]] = None
    ) -> DecomposedScene:
        """Decompose a batch ``(N, 3, H, W)`` of low-light images."""


class SceneDecompositionModule(nn.Module, Decomposer):
    """Residual network predicting a 3-channel illumination map."""

    NUM_BLOCKS = 3

    def __init__(self, width: int = 32, eps: float = DEFAULT_EPS):
        super().__init__()
        if not 0 < eps < 1:
            raise DataValidationError(f"eps must lie in (0, 1), got {eps}")
        self.width = width
        self.eps = eps
        self.in_adapter = nn.Conv2d(3, width, kernel_size=1)
        self.blocks = nn.Sequential(*[ResidualBlock(width) for _ in range(self.NUM_BLOCKS)])
        self.out_adapter = nn.Conv2d(width, 3, kernel_size=1)

    def illumination_logits(self, low_light: torch.Tensor) -> torch.Tensor:
        return self.out_adapter(self.blocks(self.in_adapter(low_light)))

    def forward(self, low_light: torch.Tensor, require_divisible: bool = True) -> DecomposedScene:
        low_light = validate_image(low_light, require_divisible=require_divisible)
        illumination = torch.sigmoid(self.illumination_logits(low_light)).clamp(min=self.eps, max=1.0)
        reflectance = low_light / illumination
        return DecomposedScene(illumination=illumination, reflectance=reflectance, eps=self.eps)

    def decompose_batch(self, low_light, image_ids=None) -> DecomposedScene:
        return self(low_light)


class PrecomputedDecomposer(nn.Module, Decomposer):
    """Decomposer backed by illumination maps produced by an external enhancer."""

    def __init__(self, store: "PrecomputedDecompositionStore", eps: float = DEFAULT_EPS):
        super().__init__()
        self.store = store
        self.eps = eps

    def forward(self, low_light: torch.Tensor, image_ids: Sequence[str]) -> DecomposedScene:
        low_light = validate_image(low_light)
        if image_ids is None or len(image_ids) != low_light.shape[0]:
            raise DataValidationError("precomputed decomposition needs one image id per batch element")
        scenes = [
            decompose_external(img, self.store, image_id, eps=self.eps, resize=True)
            for img, image_id in zip(low_light, image_ids)
        ]
        return DecomposedScene(
            illumination=torch.stack([s.illumination[0] for s in scenes]),
            reflectance=torch.stack([s.reflectance[0] for s in scenes]),
            eps=self.eps,
        )

    def decompose_batch(self, low_light, image_ids=None) -> DecomposedScene:
        return self(low_light, image_ids)


def decompose(low_light: torch.Tensor, module: SceneDecompositionModule) -> DecomposedScene:
    """Decompose one image or batch with the learned module."""
    return module(low_light)


def decompose_external(
    low_light: torch.Tensor,
    store: "PrecomputedDecompositionStore",
    image_id: str,
    eps: float = DEFAULT_EPS,
    resize: bool = False,
) -> DecomposedScene:
    """Decompose with a stored illumination map keyed by ``image_id``."""
    low_light = validate_image(low_light)
    illumination = torch.as_tensor(store.load(image_id), dtype=low_light.dtype, device=low_light.device)
    if illumination.dim() == 2:
        illumination = illumination.unsqueeze(0)
    low, high = illumination.min().item(), illumination.max().item()
    if not torch.isfinite(illumination).all() or low <= 0 or high > 1:
        logger.warning("Illumination for '%s' spans [%.6g, %.6g], outside (0, 1]", image_id, low, high)
        raise DataValidationError(
            f"illumination for '{image_id}' must lie in (0, 1], got range [{low:.6g}, {high:.6g}]"
        )
    if illumination.shape[0] == 1:
        illumination = illumination.expand(3, -1, -1)
    illumination = illumination.unsqueeze(0)
    if illumination.shape[-2:] != low_light.shape[-2:]:
        if not resize:
            raise DataValidationError(
                f"illumination for '{image_id}' is {tuple(illumination.shape[-2:])}, "
                f"image is {tuple(low_light.shape[-2:])}"
            )
        illumination = F.interpolate(illumination, size=low_light.shape[-2:], mode="bilinear", align_corners=False)
    illumination = illumination.clamp(min=eps, max=1.0)
    return DecomposedScene(illumination=illumination, reflectance=low_light / illumination, eps=eps)


def reflectance_statistics(scene: DecomposedScene) -> Dict[str, float]:
    """Brightness summary of a decomposition (reported, never asserted)."""
    with torch.no_grad():
        return {
            "reflectance_mean": scene.reflectance.mean().item(),
            "reflectance_min": scene.reflectance.min().item(),
            "reflectance_max": scene.reflectance.max().item(),
            "illumination_mean": scene.illumination.mean().item(),
        }
