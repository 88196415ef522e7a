"""
Detection API routes.
"""

import logging
from dataclasses import dataclass, field
from typing import List

import torch
from fastapi import APIRouter, Depends, File, HTTPException, Query, Request, UploadFile
from fastapi.concurrency import run_in_threadpool

from src.exceptions import DataValidationError, DecompositionLookupError
from src.models.detector import LowLightDetector
from src.schemas.config_schemas import EvalConfig
from src.schemas.detection_schemas import DetectionListResponse, DetectionResponse, HealthResponse
from src.schemas.synth_schemas import CLASS_NAMES
from src.services.dataset_service import decode_image_bytes
from src.services.detection_service import detect_image

logger = logging.getLogger(__name__)

detect_router = APIRouter()


@dataclass
class DetectorHandle:
    """Loaded model plus the post-processing settings it is served with."""

    model: LowLightDetector
    eval_config: EvalConfig
    class_names: List[str] = field(default_factory=lambda: list(CLASS_NAMES))


def get_detector(request: Request) -> DetectorHandle:
    """Dependency returning the served detector (503 when none is loaded)."""
    handle = getattr(request.app.state, "detector", None)
    if handle is None:
        raise HTTPException(status_code=503, detail="No detector loaded; set T2_CHECKPOINT")
    return handle


@detect_router.get("/health", response_model=HealthResponse)
async def health_check(request: Request):
    handle = getattr(request.app.state, "detector", None)
    return HealthResponse(
        status="healthy",
        model_loaded=handle is not None,
        variant=handle.model.variant.value if handle is not None else None,
    )


@detect_router.post("/detect", response_model=DetectionListResponse)
async def detect_upload(
    file: UploadFile = File(..., description="Image file (PNG, JPEG, ...)"),
    score_threshold: float = Query(0.3, ge=0.0, le=1.0),
    detector: DetectorHandle = Depends(get_detector),
):
    """Detect objects in an uploaded low-light image."""
    data = await file.read()
    if not data:
        raise HTTPException(status_code=422, detail="Uploaded file is empty")
    if detector.model.uses_external_decomposer:
        raise HTTPException(status_code=422, detail="Served model needs precomputed illumination per image")
    try:
        image = torch.from_numpy(decode_image_bytes(data))
        image_id = (file.filename or "upload").rsplit(".", 1)[0]
        dets = await run_in_threadpool(
            detect_image, detector.model, image, detector.eval_config, score_threshold, image_id
        )
    except (DataValidationError, DecompositionLookupError) as exc:
        raise HTTPException(status_code=422, detail=str(exc))

    logger.info("Detected %d objects in %s", len(dets), image_id)
    return DetectionListResponse(
        image_id=image_id,
        width=int(image.shape[-1]),
        height=int(image.shape[-2]),
        variant=detector.model.variant.value,
        detections=[DetectionResponse.from_detection(d, detector.class_names) for d in dets],
    )
