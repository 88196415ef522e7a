"""
Tests for focal loss, smooth L1, negative mining and the batched detection loss.
"""

import math

import pytest
import torch
import torch.nn.functional as F

from src.exceptions import DataValidationError, TrainingDivergenceError
from src.models.tensors import HeadOutputs
from src.schemas.config_schemas import LossConfig
from src.services.anchor_service import AnchorLabel, MatchResult, generate_anchors, match
from src.services.loss_service import (
    class_targets,
    detection_loss,
    focal_loss,
    focal_terms,
    mine_negatives,
    smooth_l1,
)


pytestmark = pytest.mark.unit


def make_match(assignment):
    assignment = torch.tensor(assignment, dtype=torch.long)
    return MatchResult(assignment=assignment, best_iou=torch.zeros(len(assignment)))


@pytest.fixture
def anchors():
    return generate_anchors(128, 128)


class TestFocalLoss:
    """Tests for the focal confidence term."""

    def test_reduces_to_half_cross_entropy(self):
        """gamma = 0 and alpha = 0.5 give half the cross-entropy."""
        torch.manual_seed(0)
        logits = torch.randn(50, 5, dtype=torch.float64)
        assignment = [0, 1, 2, -1, -1] * 10
        result = make_match(assignment)
        labels = torch.tensor([0, 3, 1])
        targets = class_targets(result, labels)
        focal = focal_loss(logits, result, labels, gamma=0.0, alpha_f=0.5)
        ce = F.cross_entropy(logits, targets, reduction="sum")
        assert focal.item() == pytest.approx(0.5 * ce.item(), abs=1e-9)

    def test_targets_shift_classes_past_background(self):
        """Positives target class_id + 1; everything else targets background."""
        result = make_match([1, -1, 0, -2])
        targets = class_targets(result, torch.tensor([2, 0]))
        assert targets.tolist() == [1, 0, 3, 0]

    def test_ignored_anchors_excluded_by_default(self):
        """Ignored anchors contribute nothing."""
        logits = torch.zeros(3, 3, dtype=torch.float64)
        with_ignored = focal_loss(logits, make_match([-1, -1, int(AnchorLabel.IGNORED)]), torch.tensor([0]))
        without = focal_loss(logits[:2], make_match([-1, -1]), torch.tensor([0]))
        assert with_ignored.item() == pytest.approx(without.item())

    def test_confident_correct_prediction_costs_little(self):
        """The modulating factor suppresses easy examples."""
        logits = torch.tensor([[10.0, -10.0], [-10.0, 10.0]], dtype=torch.float64)
        terms = focal_terms(logits, torch.tensor([0, 1]), torch.tensor([False, True]))
        assert terms.max().item() < 1e-12

    @pytest.mark.parametrize("gamma", [0.0, 0.5, 2.0, 5.0])
    def test_monotone_in_correct_logit(self, gamma):
        """Raising the correct-class logit never raises the loss."""
        generator = torch.Generator().manual_seed(int(gamma * 10))
        logits = torch.randn(64, 5, generator=generator, dtype=torch.float64) * 3
        targets = torch.randint(0, 5, (64,), generator=generator)
        positive = targets > 0
        previous = focal_terms(logits, targets, positive, gamma=gamma)
        rows = torch.arange(64)
        for _ in range(40):
            logits[rows, targets] += 0.25
            current = focal_terms(logits, targets, positive, gamma=gamma)
            assert (current <= previous + 1e-12).all()
            previous = current

    def test_probability_floor(self):
        """Extremely wrong predictions stay finite."""
        logits = torch.tensor([[1000.0, -1000.0]], dtype=torch.float64)
        terms = focal_terms(logits, torch.tensor([1]), torch.tensor([True]))
        assert math.isfinite(terms.item())
        assert terms.item() == pytest.approx(-0.25 * math.log(1e-12))


class TestSmoothL1:
    """Tests for the localization loss."""

    def test_spot_values(self):
        """0.125 at 0.5 and 1.5 at 2."""
        assert smooth_l1(torch.tensor([0.5]), torch.tensor([0.0])).item() == pytest.approx(0.125)
        assert smooth_l1(torch.tensor([2.0]), torch.tensor([0.0])).item() == pytest.approx(1.5)

    def test_symmetric(self):
        """Sign of the error does not matter."""
        assert smooth_l1(torch.tensor([-2.0]), torch.tensor([0.0])).item() == pytest.approx(1.5)


class TestNegativeMining:
    """Tests for hard negative selection."""

    def test_three_negatives_per_positive(self):
        """The hardest 3 negatives per positive are kept."""
        result = make_match([0, -1, -1, -1, -1, -1, -1, -1])
        losses = torch.tensor([0.0, 0.1, 0.9, 0.5, 0.7, 0.2, 0.3, 0.8])
        selection = mine_negatives(losses, result, ratio=3.0)
        assert selection.nonzero().flatten().tolist() == [0, 2, 4, 7]

    def test_no_positives_keeps_minimum(self):
        """Images without objects still train on 16 negatives."""
        result = make_match([-1] * 40)
        selection = mine_negatives(torch.rand(40), result, min_negatives=16)
        assert int(selection.sum()) == 16

    def test_infinite_ratio_keeps_all(self):
        """ratio = inf disables mining."""
        result = make_match([0, -1, -1, -2, -1])
        selection = mine_negatives(torch.rand(5), result, ratio=math.inf)
        assert selection.tolist() == [True, True, True, False, True]

    def test_ties_are_stable(self):
        """Equal losses keep the lower anchor index first."""
        result = make_match([0, -1, -1, -1, -1, -1])
        selection = mine_negatives(torch.ones(6), result, ratio=2.0)
        assert selection.nonzero().flatten().tolist() == [0, 1, 2]

    def test_never_selects_ignored(self):
        """Ignored anchors are never mined."""
        result = make_match([0, -2, -2, -1])
        selection = mine_negatives(torch.tensor([0.0, 9.0, 9.0, 1.0]), result, ratio=3.0)
        assert selection.tolist() == [True, False, False, True]


class TestDetectionLoss:
    """Tests for the batched loss."""

    def _outputs(self, anchors, batch=2, seed=0):
        generator = torch.Generator().manual_seed(seed)
        return HeadOutputs(
            class_logits=torch.randn(batch, len(anchors), 5, generator=generator, dtype=torch.float64),
            box_regression=torch.randn(batch, len(anchors), 4, generator=generator, dtype=torch.float64) * 0.1,
        )

    def test_normalized_by_positives(self, anchors):
        """Total equals (conf + alpha * loc) / max(#pos, 1)."""
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 40.0]]), torch.tensor([[60.0, 60.0, 120.0, 100.0]])]
        labels = [torch.tensor([0]), torch.tensor([3])]
        matches = [match(anchors, b) for b in boxes]
        losses = detection_loss(self._outputs(anchors), matches, boxes, labels, anchors, LossConfig(alpha=2.0))
        assert losses.num_positives == sum(m.num_positives for m in matches)
        assert losses.total.item() == pytest.approx(losses.conf.item() + 2.0 * losses.loc.item())
        assert losses.total.item() > 0

    def test_background_only_image(self, anchors):
        """Without objects the loss is the mined confidence term alone."""
        boxes = [torch.zeros((0, 4))]
        matches = [match(anchors, boxes[0])]
        losses = detection_loss(self._outputs(anchors, batch=1), matches, boxes, [torch.zeros(0, dtype=torch.long)], anchors)
        assert losses.num_positives == 0
        assert losses.loc.item() == 0.0
        assert losses.conf.item() > 0

    def test_non_finite_loss_raises(self, anchors):
        """A NaN in the outputs aborts with a divergence error."""
        outputs = self._outputs(anchors, batch=1)
        outputs.class_logits[0, :, 0] = float("nan")
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 40.0]])]
        matches = [match(anchors, boxes[0])]
        with pytest.raises(TrainingDivergenceError) as exc_info:
            detection_loss(outputs, matches, boxes, [torch.tensor([1])], anchors, batch_id="b0")
        assert exc_info.value.batch_id == "b0"

    def test_label_outside_head_classes(self, anchors):
        """A label the head has no logit for is a validation error."""
        boxes = [torch.tensor([[10.0, 10.0, 40.0, 40.0]])]
        matches = [match(anchors, boxes[0])]
        with pytest.raises(DataValidationError, match="class labels"):
            detection_loss(self._outputs(anchors, batch=1), matches, boxes, [torch.tensor([4])], anchors)
