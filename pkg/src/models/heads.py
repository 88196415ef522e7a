"""
Classification and box-regression heads over a feature pyramid.
"""

from typing import List, Sequence

import torch
import torch.nn as nn

from src.models.tensors import FeaturePyramid, HeadOutputs


class DetectionHead(nn.Module):
    """3x3 conv heads; one pair shared across levels when widths agree, else one pair per level."""

    def __init__(self, in_channels: Sequence[int], num_classes: int, anchors_per_location: int = 1):
        super().__init__()
        self.num_classes = num_classes
        self.cls_out_channels = num_classes + 1
        self.anchors_per_location = anchors_per_location
        self.shared = len(set(in_channels)) == 1
        heads_needed = 1 if self.shared else len(in_channels)
        widths = list(in_channels)[:heads_needed]
        self.cls_convs = nn.ModuleList(
            [nn.Conv2d(c, anchors_per_location * self.cls_out_channels, kernel_size=3, padding=1) for c in widths]
        )
        self.reg_convs = nn.ModuleList(
            [nn.Conv2d(c, anchors_per_location * 4, kernel_size=3, padding=1) for c in widths]
        )
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for conv in list(self.cls_convs) + list(self.reg_convs):
            nn.init.normal_(conv.weight, std=0.01)
            nn.init.zeros_(conv.bias)
        # Background starts likely so the first steps are not swamped by negatives.
        for conv in self.cls_convs:
            with torch.no_grad():
                bias = conv.bias.view(self.anchors_per_location, self.cls_out_channels)
                bias[:, 0] = 4.0

    def _flatten(self, x: torch.Tensor, per_anchor: int) -> torch.Tensor:
        n = x.shape[0]
        return x.permute(0, 2, 3, 1).reshape(n, -1, per_anchor)

    def forward(self, pyramid: FeaturePyramid) -> HeadOutputs:
        cls_scores: List[torch.Tensor] = []
        box_preds: List[torch.Tensor] = []
        for index, feature in enumerate(pyramid):
            head = 0 if self.shared else index
            cls_scores.append(self._flatten(self.cls_convs[head](feature.data), self.cls_out_channels))
            box_preds.append(self._flatten(self.reg_convs[head](feature.data), 4))
        return HeadOutputs(class_logits=torch.cat(cls_scores, dim=1), box_regression=torch.cat(box_preds, dim=1))
