"""
Detection metrics: IoU, greedy NMS, precision/recall curves and (m)AP.

AP is the all-point interpolated area under the precision envelope, with one
PR point per unique score threshold (tied scores enter together).
"""

import csv
import logging
from collections import defaultdict
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from src.exceptions import DataValidationError, StorageError
from src.schemas.detection_schemas import Annotation, Box, ClassApResult, Detection, PrCurve

logger = logging.getLogger(__name__)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner arrays ``(n, 4)`` x ``(m, 4)``."""
    if a.size == 0 or b.size == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    xx1 = np.maximum(a[:, None, 0], b[None, :, 0])
    yy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    xx2 = np.minimum(a[:, None, 2], b[None, :, 2])
    yy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.maximum(0.0, xx2 - xx1) * np.maximum(0.0, yy2 - yy1)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def _boxes_array(items: Sequence) -> np.ndarray:
    if not items:
        return np.zeros((0, 4))
    return np.array([item.box.as_tuple() for item in items], dtype=np.float64)


def score_order(scores: np.ndarray) -> np.ndarray:
    """Indices by descending score, ties by ascending input index."""
    return np.lexsort((np.arange(len(scores)), -scores))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, overlap: float = 0.3, keep_top: int = 750) -> List[int]:
    """Greedy suppression on arrays; returns kept input indices in score order."""
    order = score_order(scores)
    keep: List[int] = []
    while order.size > 0 and len(keep) < keep_top:
        i = int(order[0])
        keep.append(i)
        rest = order[1:]
        overlaps = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overlaps <= overlap]
    return keep


def nms(dets: Sequence[Detection], overlap: float = 0.3, keep_top: int = 750) -> List[Detection]:
    """Per-class greedy NMS keeping at most ``keep_top`` detections."""
    if not dets:
        return []
    scores = np.array([d.score for d in dets], dtype=np.float64)
    return [dets[i] for i in nms_indices(_boxes_array(dets), scores, overlap, keep_top)]


def _match_detections(
    dets: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Greedy TP flags in score order; returns (sorted scores, tp flags)."""
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = score_order(scores)
    truths_by_image: Dict[str, List[int]] = defaultdict(list)
    for index, truth in enumerate(truths):
        truths_by_image[truth.image_id].append(index)
    truth_boxes = _boxes_array(truths)
    matched = np.zeros(len(truths), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for rank, det_index in enumerate(order):
        det = dets[det_index]
        candidates = [j for j in truths_by_image.get(det.image_id, []) if not matched[j]]
        if not candidates:
            continue
        overlaps = iou_matrix(np.array([det.box.as_tuple()]), truth_boxes[candidates])[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            matched[candidates[best]] = True
            tp[rank] = True
    return scores[order], tp


def pr_curve(
    dets: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float = 0.5, class_id: int = 0
) -> PrCurve:
    """One (recall, precision) point per unique score threshold, highest first."""
    if not dets:
        return PrCurve(class_id=class_id)
    sorted_scores, tp = _match_detections(dets, truths, iou_threshold)
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.append(sorted_scores[1:] != sorted_scores[:-1], True))
    num_truths = len(truths)
    recalls = (tp_cum[ends] / num_truths) if num_truths else np.zeros(len(ends))
    precisions = tp_cum[ends] / (tp_cum[ends] + fp_cum[ends])
    return PrCurve(
        class_id=class_id,
        recalls=recalls.tolist(),
        precisions=precisions.tolist(),
        thresholds=sorted_scores[ends].tolist(),
    )


def area_under_envelope(recalls: Sequence[float], precisions: Sequence[float]) -> float:
    """All-point interpolated AP over PR points."""
    mrec = np.concatenate(([0.0], np.asarray(recalls, dtype=np.float64), [1.0]))
    mpre = np.concatenate(([0.0], np.asarray(precisions, dtype=np.float64), [0.0]))
    for i in range(mpre.size - 1, 0, -1):
        mpre[i - 1] = max(mpre[i - 1], mpre[i])
    i = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[i + 1] - mrec[i]) * mpre[i + 1]))


def class_average_precision(
    dets: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float = 0.5, class_id: int = 0
) -> ClassApResult:
    """AP of one class together with the bookkeeping that produced it."""
    if not truths:
        logger.warning("Class %d has no ground truth; AP defined as 0", class_id)
        return ClassApResult(class_id=class_id, ap=0.0, num_truths=0, num_detections=len(dets), flagged=True)
    curve = pr_curve(dets, truths, iou_threshold, class_id)
    ap = area_under_envelope(curve.recalls, curve.precisions) if curve.recalls else 0.0
    return ClassApResult(class_id=class_id, ap=ap, num_truths=len(truths), num_detections=len(dets))


def average_precision(dets: Sequence[Detection], truths: Sequence[Annotation], iou_threshold: float = 0.5) -> float:
    """All-point interpolated AP of a single class."""
    return class_average_precision(dets, truths, iou_threshold).ap


def mean_ap(class_aps: Iterable[float]) -> float:
    """Unweighted mean over classes."""
    values = list(class_aps)
    return float(np.mean(values)) if values else 0.0


def evaluate_detections(
    dets: Sequence[Detection],
    truths: Sequence[Annotation],
    num_classes: int,
    iou_threshold: float = 0.5,
    score_threshold: float = 0.0,
) -> Tuple[List[ClassApResult], List[PrCurve]]:
    """Per-class AP results and PR curves over a whole split."""
    stray = sorted({t.class_id for t in truths if not 0 <= t.class_id < num_classes})
    if stray:
        raise DataValidationError(f"ground truth class ids {stray} lie outside [0, {num_classes})")
    results: List[ClassApResult] = []
    curves: List[PrCurve] = []
    for class_id in range(num_classes):
        class_dets = [d for d in dets if d.class_id == class_id and d.score >= score_threshold]
        class_truths = [t for t in truths if t.class_id == class_id]
        results.append(class_average_precision(class_dets, class_truths, iou_threshold, class_id))
        curves.append(pr_curve(class_dets, class_truths, iou_threshold, class_id))
    return results, curves


def export_pr_csv(curve: PrCurve, path: Path) -> Path:
    """Write ``threshold,recall,precision`` rows."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["threshold", "recall", "precision"])
            for threshold, recall, precision in zip(curve.thresholds, curve.recalls, curve.precisions):
                writer.writerow([repr(threshold), repr(recall), repr(precision)])
    except OSError as exc:
        raise StorageError(f"cannot write PR curve ({exc})", str(path)) from exc
    return path


def read_pr_csv(path: Path, class_id: int = 0) -> PrCurve:
    """Load a curve written by ``export_pr_csv``."""
    try:
        with Path(path).open(newline="", encoding="utf-8") as handle:
            rows = list(csv.DictReader(handle))
    except OSError as exc:
        raise StorageError(f"cannot read PR curve ({exc})", str(path)) from exc
    return PrCurve(
        class_id=class_id,
        thresholds=[float(r["threshold"]) for r in rows],
        recalls=[float(r["recall"]) for r in rows],
        precisions=[float(r["precision"]) for r in rows],
    )


def plot_pr_curves(curves: Dict[str, PrCurve], out_path: Path, title: Optional[str] = None) -> Path:
    """Render labelled PR curves to an SVG (or any matplotlib format by suffix)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for label, curve in curves.items():
        if curve.recalls:
            ax.step(curve.recalls, curve.precisions, where="post", label=label)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0.0, 1.0)
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, linestyle=":", linewidth=0.5)
    if title:
        ax.set_title(title)
    if curves:
        ax.legend(loc="lower left", fontsize="small")
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(out_path, bbox_inches="tight")
    except OSError as exc:
        raise StorageError(f"cannot write plot ({exc})", str(out_path)) from exc
    finally:
        plt.close(fig)
    return out_path
