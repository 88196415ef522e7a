"""
Multi-scale feature aggregator.

Two-stream mode fuses the illumination and reflectance pyramids top-down:

    F_8 = P_I(F^I_8) * P_R(F^R_8)
    F_a = P_I(F^I_a) * P_R(F^R_a) + up(F_{a+1})      for a = 7..3

followed by a 3x3 smoothing conv per level. Single-stream mode replaces the
product by the one projected stream, which is a plain additive FPN.
"""

from typing import List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from src.exceptions import DataValidationError
from src.models.tensors import FeatureMap, FeaturePyramid


def upsample2x(feature: FeatureMap, mode: str = "nearest") -> FeatureMap:
    """Exact 2x spatial upsampling of a feature map."""
    return FeatureMap(
        level=feature.level - 1,
        layer_tag=feature.layer_tag,
        stride=feature.stride // 2,
        data=upsample_tensor(feature.data, mode),
    )


def upsample_tensor(x: torch.Tensor, mode: str = "nearest") -> torch.Tensor:
    if mode == "nearest":
        return F.interpolate(x, scale_factor=2, mode="nearest")
    return F.interpolate(x, scale_factor=2, mode=mode, align_corners=False)


class FeatureAggregator(nn.Module):
    """Top-down pyramid fusion with per-stream 1x1 laterals and 3x3 smoothing."""

    def __init__(
        self,
        in_channels: Sequence[int],
        width: int = 64,
        streams: int = 2,
        upsample_mode: str = "nearest",
        identity_mode: bool = False,
    ):
        super().__init__()
        if streams not in (1, 2):
            raise ValueError(f"streams must be 1 or 2, got {streams}")
        if len(in_channels) != 6:
            raise ValueError(f"expected six levels of input channels, got {len(in_channels)}")
        self.streams = streams
        self.upsample_mode = upsample_mode
        self.identity_mode = identity_mode
        if identity_mode:
            if len(set(in_channels)) != 1:
                raise ValueError("identity mode needs equal channel widths at every level")
            width = in_channels[0]
        self.width = width
        self.lateral_i = self._laterals(in_channels, width) if streams == 2 else None
        self.lateral_r = self._laterals(in_channels, width)
        self.smooth = None if identity_mode else nn.ModuleList(
            [nn.Conv2d(width, width, kernel_size=3, padding=1) for _ in in_channels]
        )

    def _laterals(self, in_channels: Sequence[int], width: int) -> Optional[nn.ModuleList]:
        if self.identity_mode:
            return None
        return nn.ModuleList([nn.Conv2d(c, width, kernel_size=1) for c in in_channels])

    @staticmethod
    def _check_pair(pyr_i: FeaturePyramid, pyr_r: FeaturePyramid) -> None:
        for map_i, map_r in zip(pyr_i, pyr_r):
            if map_i.data.shape != map_r.data.shape:
                raise DataValidationError(
                    f"pyramid shape mismatch at level {map_i.level}: "
                    f"{tuple(map_i.data.shape)} vs {tuple(map_r.data.shape)}"
                )

    def _project(self, laterals: Optional[nn.ModuleList], index: int, x: torch.Tensor) -> torch.Tensor:
        return x if laterals is None else laterals[index](x)

    def forward(self, pyr_r: FeaturePyramid, pyr_i: Optional[FeaturePyramid] = None) -> FeaturePyramid:
        """Fuse ``pyr_i`` and ``pyr_r`` (two streams) or run FPN over ``pyr_r`` (one stream)."""
        if self.streams == 2:
            if pyr_i is None:
                raise DataValidationError("two-stream aggregation needs both pyramids")
            self._check_pair(pyr_i, pyr_r)
        merged: List[Optional[torch.Tensor]] = [None] * len(pyr_r)
        above: Optional[torch.Tensor] = None
        for index in reversed(range(len(pyr_r))):
            product = self._project(self.lateral_r, index, pyr_r[index].data)
            if self.streams == 2:
                product = self._project(self.lateral_i, index, pyr_i[index].data) * product
            if above is not None:
                up = upsample_tensor(above, self.upsample_mode)
                if up.shape[-2:] != product.shape[-2:]:
                    raise DataValidationError(
                        f"level {pyr_r[index].level} is {tuple(product.shape[-2:])}, "
                        f"upsampled level above is {tuple(up.shape[-2:])}"
                    )
                product = product + up
            merged[index] = product
            above = product
        if self.smooth is not None:
            merged = [conv(x) for conv, x in zip(self.smooth, merged)]
        return FeaturePyramid([m.with_data(x) for m, x in zip(pyr_r, merged)])


def aggregate(pyr_i: FeaturePyramid, pyr_r: FeaturePyramid, aggregator: FeatureAggregator) -> FeaturePyramid:
    """Multiplicative top-down fusion of the illumination and reflectance pyramids."""
    return aggregator(pyr_r, pyr_i)
