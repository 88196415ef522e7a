"""
Turning head outputs into scored detections, and single-image inference.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np
import torch
from PIL import Image, ImageDraw

from src.exceptions import StorageError
from src.models.detector import LowLightDetector
from src.models.tensors import HeadOutputs
from src.schemas.config_schemas import EvalConfig
from src.schemas.detection_schemas import Box, Detection
from src.services.anchor_service import AnchorSet, decode_tensor
from src.services.dataset_service import prepare_detection_input, read_image
from src.services.evaluation_service import nms_indices, score_order

logger = logging.getLogger(__name__)

OVERLAY_COLORS = ((255, 80, 80), (80, 220, 80), (90, 140, 255), (255, 210, 60))


def postprocess(
    outputs: HeadOutputs,
    anchors: AnchorSet,
    image_ids: Optional[Sequence[str]] = None,
    config: Optional[EvalConfig] = None,
    variances=(0.1, 0.2),
) -> List[List[Detection]]:
    """Decode, score, filter and suppress; one detection list per image.

    Per class: keep scores above ``score_threshold_pre_nms``, take the top
    ``pre_nms_top_k``, run NMS; then keep the best ``keep_top`` per image.
    """
    config = config or EvalConfig()
    height, width = anchors.image_size
    probs = torch.softmax(outputs.class_logits.detach().double(), dim=-1).cpu().numpy()
    anchor_boxes = anchors.centers_sizes.to(torch.float64)
    results: List[List[Detection]] = []
    for index in range(probs.shape[0]):
        image_id = image_ids[index] if image_ids is not None else ""
        boxes = decode_tensor(outputs.box_regression[index].detach().cpu().double(), anchor_boxes, variances)
        boxes = boxes.numpy()
        boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0.0, width)
        boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0.0, height)
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1]) & np.isfinite(boxes).all(axis=1)
        kept_boxes: List[np.ndarray] = []
        kept_scores: List[float] = []
        kept_classes: List[int] = []
        for cls in range(1, probs.shape[2]):
            scores = probs[index, :, cls]
            candidates = np.flatnonzero(valid & (scores > config.score_threshold_pre_nms))
            if candidates.size == 0:
                continue
            candidates = candidates[score_order(scores[candidates])[: config.pre_nms_top_k]]
            keep = nms_indices(boxes[candidates], scores[candidates], config.nms_overlap, config.keep_top)
            for k in keep:
                kept_boxes.append(boxes[candidates[k]])
                kept_scores.append(float(scores[candidates[k]]))
                kept_classes.append(cls - 1)
        order = score_order(np.array(kept_scores, dtype=np.float64))[: config.keep_top] if kept_scores else []
        results.append([
            Detection(
                box=Box(x1=float(kept_boxes[i][0]), y1=float(kept_boxes[i][1]),
                        x2=float(kept_boxes[i][2]), y2=float(kept_boxes[i][3])),
                class_id=kept_classes[i],
                score=min(max(kept_scores[i], 0.0), 1.0),
                image_id=image_id,
            )
            for i in order
        ])
    return results


@torch.no_grad()
def predict_batch(
    model: LowLightDetector,
    images: torch.Tensor,
    image_ids: Optional[Sequence[str]] = None,
    config: Optional[EvalConfig] = None,
) -> List[List[Detection]]:
    """Eval-mode forward plus post-processing for a batch."""
    model.eval()
    outputs = model(images, image_ids)
    anchors = model.anchors(images.shape[-2], images.shape[-1])
    return postprocess(outputs, anchors, image_ids, config, model.anchor_config.variances)


def rescale_detection(det: Detection, sx: float, sy: float) -> Detection:
    box = det.box
    return det.model_copy(update={"box": Box(x1=box.x1 * sx, y1=box.y1 * sy, x2=box.x2 * sx, y2=box.y2 * sy)})


def detect_image(
    model: LowLightDetector,
    image: torch.Tensor,
    config: Optional[EvalConfig] = None,
    score_threshold: float = 0.0,
    image_id: str = "",
) -> List[Detection]:
    """Detections for one ``(3, H, W)`` image of any size, in its own pixels."""
    config = config or EvalConfig()
    tensor, sx, sy = prepare_detection_input(image, config.test_resize)
    dets = predict_batch(model, tensor.unsqueeze(0), [image_id], config)[0]
    return [rescale_detection(d, sx, sy) for d in dets if d.score >= score_threshold]


def detect(
    model: LowLightDetector,
    image_path: Union[str, Path],
    config: Optional[EvalConfig] = None,
    score_threshold: float = 0.0,
) -> List[Detection]:
    """Detections for one image file, in source-image pixels."""
    image = torch.from_numpy(read_image(image_path))
    return detect_image(model, image, config, score_threshold, image_id=Path(image_path).stem)


def draw_overlay(
    image_path: Union[str, Path],
    dets: Sequence[Detection],
    out_path: Union[str, Path],
    class_names: Optional[Sequence[str]] = None,
) -> Path:
    """Draw detection boxes and labels over the source image."""
    out_path = Path(out_path)
    try:
        with Image.open(image_path) as source:
            canvas = source.convert("RGB")
        draw = ImageDraw.Draw(canvas)
        for det in dets:
            color = OVERLAY_COLORS[det.class_id % len(OVERLAY_COLORS)]
            draw.rectangle(det.box.as_tuple(), outline=color, width=1)
            name = class_names[det.class_id] if class_names and det.class_id < len(class_names) else str(det.class_id)
            draw.text((det.box.x1 + 1, det.box.y1 + 1), f"{name} {det.score:.2f}", fill=color)
        out_path.parent.mkdir(parents=True, exist_ok=True)
        canvas.save(out_path)
    except OSError as exc:
        raise StorageError(f"cannot write overlay ({exc})", str(out_path)) from exc
    return out_path
