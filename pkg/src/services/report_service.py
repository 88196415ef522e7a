"""
Split evaluation: run a detector over a dataset split and build the report,
PR-curve CSVs and (optionally) an SVG plot.
"""

import logging
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.utils.data import DataLoader

from src.exceptions import StorageError
from src.models.detector import LowLightDetector
from src.models.scene_decomposition import reflectance_statistics
from src.schemas.config_schemas import ExperimentConfig
from src.schemas.detection_schemas import Detection, EvaluationReport, PrCurve
from src.services.checkpoint_service import load_checkpoint
from src.services.dataset_service import LowLightDataset, collate_samples
from src.services.detection_service import postprocess
from src.services.evaluation_service import evaluate_detections, export_pr_csv, mean_ap

logger = logging.getLogger(__name__)


@torch.no_grad()
def evaluate_model(
    model: LowLightDetector,
    dataset: LowLightDataset,
    config: ExperimentConfig,
    split: str = "test",
) -> Tuple[EvaluationReport, List[PrCurve]]:
    """Per-class AP and mAP of ``model`` over every image of ``dataset``."""
    was_training = model.training
    model.eval()
    device = next(model.parameters()).device
    loader = DataLoader(dataset, batch_size=config.train.batch_size, shuffle=False, collate_fn=collate_samples)
    dets: List[Detection] = []
    reflectance_means: List[float] = []
    illumination_means: List[float] = []
    for batch in loader:
        images = batch.images.to(device)
        outputs, scene = model.run(images, batch.image_ids)
        anchors = model.anchors(images.shape[-2], images.shape[-1])
        for image_dets in postprocess(outputs, anchors, batch.image_ids, config.eval, config.anchors.variances):
            dets.extend(image_dets)
        if scene is not None:
            stats = reflectance_statistics(scene)
            reflectance_means.append(stats["reflectance_mean"])
            illumination_means.append(stats["illumination_mean"])
    model.train(was_training)

    results, curves = evaluate_detections(
        dets,
        dataset.annotations(),
        model.num_classes,
        config.eval.iou_threshold,
        config.eval.score_threshold,
    )
    scored = [r.ap for r in results if not r.flagged]
    report = EvaluationReport(
        split=split,
        num_images=len(dataset),
        iou_threshold=config.eval.iou_threshold,
        score_threshold=config.eval.score_threshold,
        classes=results,
        mean_ap=mean_ap(scored),
        empty=len(dataset) == 0,
        reflectance_mean=float(np.mean(reflectance_means)) if reflectance_means else None,
        illumination_mean=float(np.mean(illumination_means)) if illumination_means else None,
    )
    if report.empty:
        logger.warning("Split '%s' holds no images; reporting mAP 0", split)
    else:
        logger.info("Split '%s': mAP %.4f over %d images", split, report.mean_ap, report.num_images)
    if report.reflectance_mean is not None:
        logger.info(
            "Mean reflectance %.4f, mean illumination %.4f", report.reflectance_mean, report.illumination_mean
        )
    return report, curves


def write_report(
    report: EvaluationReport,
    curves: List[PrCurve],
    out_dir: Union[str, Path],
    class_names: Optional[List[str]] = None,
) -> Dict[str, Path]:
    """Write ``report-<split>.json`` and one ``pr-<split>-<class>.csv`` per class."""
    out_dir = Path(out_dir)
    written: Dict[str, Path] = {}
    report_path = out_dir / f"report-{report.split}.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        report_path.write_text(report.to_json(), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write evaluation report ({exc})", str(report_path)) from exc
    written["report"] = report_path
    for curve in curves:
        name = class_names[curve.class_id] if class_names and curve.class_id < len(class_names) else str(curve.class_id)
        written[name] = export_pr_csv(curve, out_dir / f"pr-{report.split}-{name}.csv")
    return written


def evaluate(
    checkpoint_path: Union[str, Path],
    data_root: Union[str, Path],
    split: str = "test",
    out_dir: Optional[Union[str, Path]] = None,
    config: Optional[ExperimentConfig] = None,
) -> EvaluationReport:
    """Load a checkpoint, evaluate one split and write the report files.

    ``config`` overrides the evaluation settings echoed in the checkpoint;
    the architecture always comes from the checkpoint.
    """
    checkpoint = load_checkpoint(checkpoint_path)
    model = checkpoint.build()
    eval_config = checkpoint.config
    if config is not None:
        eval_config = eval_config.model_copy(update={"eval": config.eval, "data": config.data})
    dataset = LowLightDataset(
        data_root, split, resize=eval_config.eval.test_resize, config=eval_config.data,
        num_classes=eval_config.model.num_classes,
    )
    report, curves = evaluate_model(model, dataset, eval_config, split=split)
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint_path).parent
    write_report(report, curves, out_dir, dataset.class_names)
    return report
