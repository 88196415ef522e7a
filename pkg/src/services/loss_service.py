"""
Detection training loss: focal confidence loss on mined anchors plus smooth L1.

    L = (1 / N) * (L_conf + alpha * L_loc),   N = max(#positives, 1)
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F

from src.exceptions import DataValidationError, TrainingDivergenceError
from src.models.tensors import HeadOutputs
from src.schemas.config_schemas import LossConfig
from src.services.anchor_service import AnchorLabel, AnchorSet, MatchResult, encode_tensor

LOG_PROB_FLOOR = math.log(1e-12)


@dataclass
class LossBreakdown:
    """Total loss and its normalized terms."""

    total: torch.Tensor
    conf: torch.Tensor
    loc: torch.Tensor
    num_positives: int

    def as_dict(self) -> dict:
        return {
            "loss": self.total.item(),
            "conf": self.conf.item(),
            "loc": self.loc.item(),
            "positives": self.num_positives,
        }


def class_targets(match_result: MatchResult, truth_labels: torch.Tensor) -> torch.Tensor:
    """Target class per anchor: 0 for background, ``class_id + 1`` for positives."""
    targets = torch.zeros_like(match_result.assignment)
    positive = match_result.positive_mask
    if positive.any():
        targets[positive] = truth_labels[match_result.assignment[positive]] + 1
    return targets


def focal_terms(
    logits: torch.Tensor,
    targets: torch.Tensor,
    positive: torch.Tensor,
    gamma: float = 2.0,
    alpha_f: float = 0.25,
) -> torch.Tensor:
    """Per-anchor ``-alpha_t (1 - p_t)^gamma ln p_t`` with softmax probabilities."""
    log_p = F.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    log_p = log_p.clamp(min=LOG_PROB_FLOOR)
    p_t = log_p.exp()
    alpha_t = torch.where(positive, torch.full_like(p_t, alpha_f), torch.full_like(p_t, 1.0 - alpha_f))
    modulator = (1.0 - p_t).clamp(min=0.0) ** gamma if gamma else torch.ones_like(p_t)
    return -alpha_t * modulator * log_p


def focal_loss(
    scores: torch.Tensor,
    match_result: MatchResult,
    truth_labels: torch.Tensor,
    selection: Optional[torch.Tensor] = None,
    gamma: float = 2.0,
    alpha_f: float = 0.25,
) -> torch.Tensor:
    """Focal loss summed over the selected anchors (all non-ignored when no selection)."""
    targets = class_targets(match_result, truth_labels)
    terms = focal_terms(scores, targets, match_result.positive_mask, gamma, alpha_f)
    if selection is None:
        selection = match_result.assignment != AnchorLabel.IGNORED
    return terms[selection].sum()


def smooth_l1(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Summed smooth L1: ``0.5 x^2`` if ``|x| < 1`` else ``|x| - 0.5``."""
    diff = (pred - target).abs()
    return torch.where(diff < 1.0, 0.5 * diff ** 2, diff - 0.5).sum()


def mine_negatives(
    conf_losses: torch.Tensor,
    match_result: MatchResult,
    ratio: float = 3.0,
    min_negatives: int = 16,
) -> torch.Tensor:
    """Selection mask: all positives plus the hardest negatives at ``ratio`` per positive."""
    positive = match_result.positive_mask
    negative = match_result.negative_mask
    selection = positive.clone()
    num_negatives = int(negative.sum().item())
    num_positives = int(positive.sum().item())
    if math.isinf(ratio):
        k = num_negatives
    elif num_positives > 0:
        k = math.ceil(ratio * num_positives)
    else:
        k = min_negatives
    k = min(k, num_negatives)
    if k <= 0:
        return selection
    ranked = conf_losses.detach().masked_fill(~negative, -math.inf)
    order = torch.sort(ranked, descending=True, stable=True).indices[:k]
    selection[order] = True
    return selection


def detection_loss(
    outputs: HeadOutputs,
    matches: Sequence[MatchResult],
    truth_boxes: Sequence[torch.Tensor],
    truth_labels: Sequence[torch.Tensor],
    anchors: AnchorSet,
    config: Optional[LossConfig] = None,
    variances=(0.1, 0.2),
    batch_id: Optional[str] = None,
) -> LossBreakdown:
    """Batched detection loss with the ``1 / N`` normalization over total positives."""
    config = config or LossConfig()
    device = outputs.class_logits.device
    anchor_boxes = anchors.centers_sizes.to(device=device, dtype=outputs.box_regression.dtype)
    conf_terms: List[torch.Tensor] = []
    loc_terms: List[torch.Tensor] = []
    num_positives = 0
    num_classes = outputs.class_logits.shape[-1] - 1
    for index, match_result in enumerate(matches):
        labels = truth_labels[index].to(device)
        if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= num_classes):
            raise DataValidationError(
                f"class labels must lie in [0, {num_classes}), got [{int(labels.min())}, {int(labels.max())}]"
            )
        targets = class_targets(match_result, labels).to(device)
        positive = match_result.positive_mask.to(device)
        per_anchor = focal_terms(outputs.class_logits[index], targets, positive, config.gamma, config.focal_alpha)
        selection = mine_negatives(per_anchor, match_result, config.neg_pos_ratio, config.min_negatives).to(device)
        conf_terms.append(per_anchor[selection].sum())
        if positive.any():
            boxes = truth_boxes[index].to(device=device, dtype=anchor_boxes.dtype)
            assigned = boxes[match_result.assignment.to(device)[positive]]
            target = encode_tensor(assigned, anchor_boxes[positive], variances)
            loc_terms.append(smooth_l1(outputs.box_regression[index][positive], target))
        else:
            loc_terms.append(outputs.box_regression.new_zeros(()))
        num_positives += int(positive.sum().item())

    normalizer = float(max(num_positives, 1))
    conf = torch.stack(conf_terms).sum() / normalizer
    loc = torch.stack(loc_terms).sum() / normalizer
    total = conf + config.alpha * loc
    if not torch.isfinite(total):
        raise TrainingDivergenceError(f"non-finite loss on batch {batch_id}", batch_id=batch_id)
    return LossBreakdown(total=total, conf=conf, loc=loc, num_positives=num_positives)
