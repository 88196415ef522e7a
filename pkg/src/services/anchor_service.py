"""
Anchor generation, ground-truth matching and center-size box coding.
"""

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import List, Optional, Sequence, Tuple

import torch

from src.exceptions import DataValidationError
from src.models.tensors import PYRAMID_LEVELS, level_stride, validate_spatial
from src.schemas.config_schemas import AnchorConfig
from src.schemas.detection_schemas import Annotation, Box

DEFAULT_VARIANCES: Tuple[float, float] = (0.1, 0.2)


class AnchorLabel(IntEnum):
    """Assignment codes below zero; non-negative codes are ground-truth indices."""
    NEGATIVE = -1
    IGNORED = -2


@dataclass
class AnchorSet:
    """Anchors in ``(cx, cy, w, h)`` pixels, concatenated finest level first."""

    centers_sizes: torch.Tensor
    level_counts: List[int]
    image_size: Tuple[int, int]

    def __len__(self) -> int:
        return self.centers_sizes.shape[0]

    @property
    def corners(self) -> torch.Tensor:
        return center_size_to_corners(self.centers_sizes)

    def level(self, index: int) -> torch.Tensor:
        start = sum(self.level_counts[:index])
        return self.centers_sizes[start:start + self.level_counts[index]]

    def to(self, device) -> "AnchorSet":
        return AnchorSet(self.centers_sizes.to(device), self.level_counts, self.image_size)


@dataclass
class MatchResult:
    """Per-anchor assignment: gt index (>= 0), NEGATIVE or IGNORED, plus best IoU."""

    assignment: torch.Tensor
    best_iou: torch.Tensor

    @property
    def positive_mask(self) -> torch.Tensor:
        return self.assignment >= 0

    @property
    def negative_mask(self) -> torch.Tensor:
        return self.assignment == AnchorLabel.NEGATIVE

    @property
    def num_positives(self) -> int:
        return int(self.positive_mask.sum().item())


def center_size_to_corners(boxes: torch.Tensor) -> torch.Tensor:
    half = boxes[..., 2:] / 2
    return torch.cat([boxes[..., :2] - half, boxes[..., :2] + half], dim=-1)


def corners_to_center_size(boxes: torch.Tensor) -> torch.Tensor:
    size = boxes[..., 2:] - boxes[..., :2]
    return torch.cat([boxes[..., :2] + size / 2, size], dim=-1)


def generate_anchors(image_h: int, image_w: int, config: Optional[AnchorConfig] = None) -> AnchorSet:
    """Tile anchors of size ``scale_factor * stride`` on every pyramid grid."""
    config = config or AnchorConfig()
    validate_spatial(image_h, image_w)
    per_level = []
    counts = []
    for level in PYRAMID_LEVELS:
        stride = level_stride(level)
        rows, cols = image_h // stride, image_w // stride
        size = config.scale_factor * stride
        ys = (torch.arange(rows, dtype=torch.float64) + 0.5) * stride
        xs = (torch.arange(cols, dtype=torch.float64) + 0.5) * stride
        cy, cx = torch.meshgrid(ys, xs, indexing="ij")
        shapes = torch.tensor(
            [[size * math.sqrt(r), size / math.sqrt(r)] for r in config.aspect_ratios], dtype=torch.float64
        )
        centers = torch.stack([cx, cy], dim=-1).reshape(-1, 1, 2).expand(-1, len(shapes), 2)
        sizes = shapes.reshape(1, -1, 2).expand(centers.shape[0], -1, 2)
        anchors = torch.cat([centers, sizes], dim=-1).reshape(-1, 4)
        per_level.append(anchors)
        counts.append(anchors.shape[0])
    return AnchorSet(torch.cat(per_level).float(), counts, (image_h, image_w))


def box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise IoU of corner boxes ``(n, 4)`` x ``(m, 4)``."""
    area_a = (a[:, 2] - a[:, 0]).clamp(min=0) * (a[:, 3] - a[:, 1]).clamp(min=0)
    area_b = (b[:, 2] - b[:, 0]).clamp(min=0) * (b[:, 3] - b[:, 1]).clamp(min=0)
    top_left = torch.max(a[:, None, :2], b[None, :, :2])
    bottom_right = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (bottom_right - top_left).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return torch.where(union > 0, inter / union.clamp(min=1e-12), torch.zeros_like(inter))


def annotations_to_tensor(truths: Sequence[Annotation]) -> Tuple[torch.Tensor, torch.Tensor]:
    """Stack annotation boxes ``(G, 4)`` and class ids ``(G,)``."""
    if not truths:
        return torch.zeros((0, 4)), torch.zeros((0,), dtype=torch.long)
    boxes = torch.tensor([t.box.as_tuple() for t in truths], dtype=torch.float32)
    labels = torch.tensor([t.class_id for t in truths], dtype=torch.long)
    return boxes, labels


def match(
    anchors: AnchorSet,
    truths,
    iou_threshold: float = 0.3,
    ignore_iou: Optional[float] = None,
) -> MatchResult:
    """Assign anchors to ground truths.

    An anchor is positive to its best truth when that IoU exceeds
    ``iou_threshold``. Each truth additionally claims its best anchor; truths
    are served in order of their best IoU so a shared best anchor goes to the
    stronger overlap and the other truth falls back to its next-best anchor.
    """
    truth_boxes = truths if isinstance(truths, torch.Tensor) else annotations_to_tensor(truths)[0]
    num_anchors = len(anchors)
    assignment = torch.full((num_anchors,), int(AnchorLabel.NEGATIVE), dtype=torch.long)
    if truth_boxes.shape[0] == 0:
        return MatchResult(assignment, torch.zeros(num_anchors))

    ious = box_iou(anchors.corners, truth_boxes.to(anchors.centers_sizes.dtype))
    best_iou, best_truth = ious.max(dim=1)
    positive = best_iou > iou_threshold
    assignment[positive] = best_truth[positive]
    if ignore_iou is not None:
        ignored = (best_iou > ignore_iou) & ~positive
        assignment[ignored] = int(AnchorLabel.IGNORED)

    claimed = torch.zeros(num_anchors, dtype=torch.bool)
    truth_best = ious.max(dim=0).values
    order = sorted(range(truth_boxes.shape[0]), key=lambda j: -truth_best[j].item())
    for j in order:
        column = ious[:, j].masked_fill(claimed, -1.0)
        anchor = int(torch.argmax(column).item())
        if column[anchor] <= 0:
            continue
        claimed[anchor] = True
        assignment[anchor] = j
        best_iou[anchor] = ious[anchor, j]
    return MatchResult(assignment, best_iou)


def encode_tensor(
    truths: torch.Tensor, anchors: torch.Tensor, variances: Tuple[float, float] = DEFAULT_VARIANCES
) -> torch.Tensor:
    """Regression targets of corner truths against ``(cx, cy, w, h)`` anchors."""
    if (anchors[..., 2:] <= 0).any():
        raise DataValidationError("cannot encode against a degenerate (zero-area) anchor")
    t = corners_to_center_size(truths)
    delta = (t[..., :2] - anchors[..., :2]) / (anchors[..., 2:] * variances[0])
    scale = torch.log(t[..., 2:] / anchors[..., 2:]) / variances[1]
    return torch.cat([delta, scale], dim=-1)


def decode_tensor(
    regression: torch.Tensor, anchors: torch.Tensor, variances: Tuple[float, float] = DEFAULT_VARIANCES
) -> torch.Tensor:
    """Inverse of ``encode_tensor``; returns corner boxes."""
    if (anchors[..., 2:] <= 0).any():
        raise DataValidationError("cannot decode against a degenerate (zero-area) anchor")
    centers = anchors[..., :2] + regression[..., :2] * variances[0] * anchors[..., 2:]
    sizes = anchors[..., 2:] * torch.exp(regression[..., 2:] * variances[1])
    return center_size_to_corners(torch.cat([centers, sizes], dim=-1))


def _box_to_center_size(box: Box) -> torch.Tensor:
    return corners_to_center_size(torch.tensor(box.as_tuple(), dtype=torch.float64))


def encode(truth: Box, anchor: Box, variances: Tuple[float, float] = DEFAULT_VARIANCES) -> Tuple[float, ...]:
    """Center-size regression target of ``truth`` relative to ``anchor``."""
    if anchor.area <= 0:
        raise DataValidationError("cannot encode against a degenerate (zero-area) anchor")
    target = encode_tensor(torch.tensor(truth.as_tuple(), dtype=torch.float64), _box_to_center_size(anchor), variances)
    return tuple(target.tolist())


def decode(regression: Sequence[float], anchor: Box, variances: Tuple[float, float] = DEFAULT_VARIANCES) -> Box:
    """Box described by ``regression`` relative to ``anchor``."""
    if anchor.area <= 0:
        raise DataValidationError("cannot decode against a degenerate (zero-area) anchor")
    corners = decode_tensor(torch.tensor(regression, dtype=torch.float64), _box_to_center_size(anchor), variances)
    return Box(**dict(zip(("x1", "y1", "x2", "y2"), corners.tolist())))
