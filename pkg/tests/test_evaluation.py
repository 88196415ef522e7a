"""
Tests for IoU, NMS, PR curves and AP, including brute-force references.
"""

import itertools

import numpy as np
import pytest

from src.exceptions import DataValidationError
from src.schemas.detection_schemas import Annotation, Box, Detection
from src.services.evaluation_service import (
    average_precision,
    class_average_precision,
    evaluate_detections,
    export_pr_csv,
    iou,
    mean_ap,
    nms,
    plot_pr_curves,
    pr_curve,
    read_pr_csv,
)
from tests.factories import AnnotationFactory, BoxFactory, DetectionFactory


pytestmark = pytest.mark.unit


def random_box(rng, extent=50.0, max_size=20.0):
    x1, y1 = rng.uniform(0, extent, size=2)
    w, h = rng.uniform(1.0, max_size, size=2)
    return Box(x1=x1, y1=y1, x2=x1 + w, y2=y1 + h)


def brute_force_nms(dets, overlap, keep_top):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        if len(kept) == keep_top:
            break
        if all(iou(dets[i].box, dets[k].box) <= overlap for k in kept):
            kept.append(i)
    return [dets[i] for i in kept]


def brute_force_ap(dets, truths, iou_threshold):
    """Enumerate every score threshold, re-matching from scratch each time."""
    points = []
    for threshold in sorted({d.score for d in dets}, reverse=True):
        chosen = sorted((i for i, d in enumerate(dets) if d.score >= threshold), key=lambda i: (-dets[i].score, i))
        matched = set()
        tp = 0
        for i in chosen:
            best, best_j = -1.0, None
            for j, t in enumerate(truths):
                if j in matched or t.image_id != dets[i].image_id:
                    continue
                overlap = iou(dets[i].box, t.box)
                if overlap > best:
                    best, best_j = overlap, j
            if best_j is not None and best >= iou_threshold:
                matched.add(best_j)
                tp += 1
        points.append((tp / len(truths), tp / len(chosen)))
    ap = 0.0
    previous_recall = 0.0
    for k, (recall, _) in enumerate(points):
        ap += (recall - previous_recall) * max(p for _, p in points[k:])
        previous_recall = recall
    return ap


class TestIoU:
    """Tests for the overlap measure."""

    def test_identical(self):
        """A box overlaps itself completely."""
        box = BoxFactory()
        assert iou(box, box) == 1.0

    def test_disjoint(self):
        """Separated boxes do not overlap."""
        assert iou(Box(x1=0, y1=0, x2=10, y2=10), Box(x1=20, y1=20, x2=30, y2=30)) == 0.0

    def test_partial(self):
        """[0,0,10,10] vs [5,5,15,15] overlaps by 25/175."""
        a = Box(x1=0, y1=0, x2=10, y2=10)
        b = Box(x1=5, y1=5, x2=15, y2=15)
        assert iou(a, b) == pytest.approx(25 / 175)

    def test_symmetric_and_bounded(self):
        """iou is symmetric and lies in [0, 1]."""
        rng = np.random.default_rng(0)
        for _ in range(200):
            a, b = random_box(rng), random_box(rng)
            assert iou(a, b) == iou(b, a)
            assert 0.0 <= iou(a, b) <= 1.0

    def test_invalid_box_rejected(self):
        """Boxes must have positive extent."""
        with pytest.raises(ValueError):
            Box(x1=5, y1=0, x2=5, y2=10)


class TestNMS:
    """Tests for greedy suppression."""

    def test_single_detection(self):
        """A lone detection survives."""
        det = DetectionFactory()
        assert nms([det]) == [det]

    def test_identical_boxes(self):
        """The lower-scored duplicate is suppressed."""
        box = Box(x1=0, y1=0, x2=10, y2=10)
        high = DetectionFactory(box=box, score=0.9)
        low = DetectionFactory(box=box, score=0.8)
        assert nms([low, high]) == [high]

    def test_disjoint_boxes(self):
        """Non-overlapping detections are all kept."""
        dets = [DetectionFactory(score=0.5), DetectionFactory(score=0.7)]
        assert len(nms(dets)) == 2

    def test_keep_top(self):
        """At most keep_top detections survive."""
        dets = [DetectionFactory(score=0.1 * (i + 1)) for i in range(5)]
        kept = nms(dets, keep_top=3)
        assert [d.score for d in kept] == pytest.approx([0.5, 0.4, 0.3])

    def test_tie_broken_by_input_order(self):
        """Equal scores keep the earlier input."""
        box = Box(x1=0, y1=0, x2=10, y2=10)
        first = DetectionFactory(box=box, score=0.5, image_id="first")
        second = DetectionFactory(box=box, score=0.5, image_id="second")
        assert nms([first, second]) == [first]

    def test_matches_brute_force(self):
        """Exact agreement with the O(n^2) reference on random instances."""
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 51))
            dets = [
                Detection(box=random_box(rng), class_id=0, score=float(rng.integers(1, 10)) / 10)
                for _ in range(n)
            ]
            keep_top = int(rng.integers(1, 60))
            assert nms(dets, 0.3, keep_top) == brute_force_nms(dets, 0.3, keep_top)


class TestAveragePrecision:
    """Tests for PR curves and AP."""

    def test_perfect_detector(self):
        """All truths found without false positives gives AP 1."""
        truths = [AnnotationFactory() for _ in range(3)]
        dets = [DetectionFactory(box=t.box, score=0.9 - 0.1 * i) for i, t in enumerate(truths)]
        assert average_precision(dets, truths) == pytest.approx(1.0)
        curve = pr_curve(dets, truths)
        assert curve.precisions == [1.0, 1.0, 1.0]

    def test_false_positive_first(self):
        """[FP, TP] by score gives AP 0.5 and points (0, 0), (1, 0.5)."""
        truth = AnnotationFactory()
        miss = DetectionFactory(box=Box(x1=500, y1=500, x2=510, y2=510), score=0.9)
        hit = DetectionFactory(box=truth.box, score=0.8)
        assert average_precision([miss, hit], [truth]) == pytest.approx(0.5)
        assert pr_curve([miss, hit], [truth]).points == [(0.0, 0.0), (1.0, 0.5)]

    def test_no_detections(self):
        """No detections give AP 0 and an empty curve."""
        assert average_precision([], [AnnotationFactory()]) == 0.0
        assert pr_curve([], [AnnotationFactory()]).points == []

    def test_class_without_truths_is_flagged(self):
        """AP is 0 and flagged when a class has no ground truth."""
        result = class_average_precision([DetectionFactory()], [], class_id=3)
        assert result.ap == 0.0
        assert result.flagged

    def test_each_truth_matched_once(self):
        """A duplicate detection of a found object is a false positive."""
        truth = AnnotationFactory()
        dets = [DetectionFactory(box=truth.box, score=0.9), DetectionFactory(box=truth.box, score=0.8)]
        curve = pr_curve(dets, [truth])
        assert curve.points == [(1.0, 1.0), (1.0, 0.5)]

    def test_matching_is_per_image(self):
        """A detection only matches truths of its own image."""
        truth = AnnotationFactory(image_id="a")
        det = DetectionFactory(box=truth.box, image_id="b")
        assert average_precision([det], [truth]) == 0.0

    def test_tied_scores_form_one_point(self):
        """Detections with equal scores enter the curve together."""
        truths = [AnnotationFactory(), AnnotationFactory()]
        dets = [DetectionFactory(box=truths[0].box, score=0.5), DetectionFactory(score=0.5)]
        curve = pr_curve(dets, truths)
        assert curve.thresholds == [0.5]
        assert curve.points == [(0.5, 0.5)]

    def test_matches_brute_force(self):
        """AP equals threshold enumeration within 1e-9 on random instances."""
        rng = np.random.default_rng(2)
        for _ in range(1000):
            truths = [
                Annotation(box=random_box(rng, 30.0), class_id=0, image_id=str(rng.integers(0, 2)))
                for _ in range(int(rng.integers(1, 6)))
            ]
            dets = [
                Detection(box=random_box(rng, 30.0), class_id=0, score=float(rng.integers(1, 8)) / 8,
                          image_id=str(rng.integers(0, 2)))
                for _ in range(int(rng.integers(0, 21)))
            ]
            for t in truths[: int(rng.integers(0, len(truths) + 1))]:
                dets.append(Detection(box=t.box, class_id=0, score=float(rng.uniform(0.1, 1.0)), image_id=t.image_id))
            expected = brute_force_ap(dets, truths, 0.5) if dets else 0.0
            assert average_precision(dets, truths, 0.5) == pytest.approx(expected, abs=1e-9)

    def test_map_invariant_to_relabeling(self):
        """Permuting class ids permutes APs but keeps mAP."""
        rng = np.random.default_rng(3)
        truths = [Annotation(box=random_box(rng), class_id=int(rng.integers(0, 3))) for _ in range(12)]
        dets = [Detection(box=t.box, class_id=t.class_id, score=float(rng.uniform(0.2, 1))) for t in truths[::2]]
        dets += [Detection(box=random_box(rng), class_id=int(rng.integers(0, 3)), score=float(rng.uniform(0, 1)))
                 for _ in range(10)]
        baseline = mean_ap(r.ap for r in evaluate_detections(dets, truths, 3)[0])
        for perm in itertools.permutations(range(3)):
            relabeled_truths = [t.model_copy(update={"class_id": perm[t.class_id]}) for t in truths]
            relabeled_dets = [d.model_copy(update={"class_id": perm[d.class_id]}) for d in dets]
            results, _ = evaluate_detections(relabeled_dets, relabeled_truths, 3)
            assert mean_ap(r.ap for r in results) == pytest.approx(baseline, abs=1e-12)

    def test_score_threshold_filters(self):
        """Detections under the evaluation threshold are ignored."""
        truth = AnnotationFactory()
        dets = [DetectionFactory(box=truth.box, score=0.3)]
        results, _ = evaluate_detections(dets, [truth], 1, score_threshold=0.5)
        assert results[0].ap == 0.0
        assert results[0].num_detections == 0

    def test_truth_class_outside_range(self):
        """Ground truths of unknown classes are refused instead of dropped."""
        truths = [AnnotationFactory(class_id=0), AnnotationFactory(class_id=5)]
        with pytest.raises(DataValidationError, match=r"\[5\]"):
            evaluate_detections([], truths, 4)

    def test_mean_ap_empty(self):
        """mAP of no classes is 0."""
        assert mean_ap([]) == 0.0


class TestCurveExport:
    """Tests for PR curve files."""

    def test_csv_round_trip(self, tmp_path):
        """Curves are written with threshold, recall, precision columns."""
        truth = AnnotationFactory()
        dets = [DetectionFactory(box=truth.box, score=0.9), DetectionFactory(score=0.4)]
        curve = pr_curve(dets, [truth])
        path = export_pr_csv(curve, tmp_path / "pr.csv")
        assert path.read_text().splitlines()[0] == "threshold,recall,precision"
        loaded = read_pr_csv(path)
        assert loaded.points == curve.points
        assert loaded.thresholds == curve.thresholds

    def test_plot_writes_svg(self, tmp_path):
        """Curves render to an SVG file."""
        truth = AnnotationFactory()
        curve = pr_curve([DetectionFactory(box=truth.box, score=0.9)], [truth])
        out = plot_pr_curves({"T2": curve}, tmp_path / "pr.svg", title="test")
        assert out.read_text().lstrip().startswith("<?xml")
