"""
Pydantic schemas for boxes, annotations, detections and evaluation reports.
"""

import json
import math
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class Box(BaseModel):
    """Axis-aligned box in pixel corner format."""

    model_config = ConfigDict(frozen=True)

    x1: float
    y1: float
    x2: float
    y2: float

    @model_validator(mode="after")
    def validate_corners(self):
        """Corners must be finite and strictly ordered."""
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"box must satisfy x1 < x2 and y1 < y2, got {coords}")
        return self

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> Tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


class Annotation(BaseModel):
    """Ground-truth object."""

    model_config = ConfigDict(frozen=True)

    box: Box
    class_id: int = Field(..., ge=0)
    image_id: str = ""

    def within(self, height: int, width: int) -> bool:
        """Check that the box lies inside an image of the given size."""
        b = self.box
        return b.x1 >= 0 and b.y1 >= 0 and b.x2 <= width and b.y2 <= height


class Detection(BaseModel):
    """Scored detector output."""

    model_config = ConfigDict(frozen=True)

    box: Box
    class_id: int = Field(..., ge=0)
    score: float = Field(..., ge=0.0, le=1.0)
    image_id: str = ""

    @field_validator("score")
    @classmethod
    def validate_score(cls, v):
        """Scores must be finite."""
        if not math.isfinite(v):
            raise ValueError("score must be finite")
        return v


class PrCurve(BaseModel):
    """Precision/recall points over descending score thresholds."""

    class_id: int
    recalls: List[float] = Field(default_factory=list)
    precisions: List[float] = Field(default_factory=list)
    thresholds: List[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_points(self):
        """Point lists align and recall never decreases."""
        if not (len(self.recalls) == len(self.precisions) == len(self.thresholds)):
            raise ValueError("recalls, precisions and thresholds must have equal length")
        if any(b < a for a, b in zip(self.recalls, self.recalls[1:])):
            raise ValueError("recall must be non-decreasing")
        return self

    @property
    def points(self) -> List[Tuple[float, float]]:
        """(recall, precision) pairs."""
        return list(zip(self.recalls, self.precisions))


class ClassApResult(BaseModel):
    """Average precision of one class."""

    class_id: int
    ap: float
    num_truths: int
    num_detections: int
    flagged: bool = Field(default=False, description="Class had no ground truth")


class EvaluationReport(BaseModel):
    """Per-class AP and mAP of one split."""

    split: str
    num_images: int
    iou_threshold: float
    score_threshold: float
    classes: List[ClassApResult] = Field(default_factory=list)
    mean_ap: float = 0.0
    empty: bool = False
    reflectance_mean: Optional[float] = None
    illumination_mean: Optional[float] = None

    def to_json(self) -> str:
        """Stable serialization (sorted keys) for byte-identical reports."""
        return json.dumps(self.model_dump(), sort_keys=True, indent=2) + "\n"


class DetectionResponse(BaseModel):
    """Detection as returned by the CLI and the HTTP API."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int
    class_name: str
    score: float

    @classmethod
    def from_detection(cls, detection: Detection, class_names: List[str]) -> "DetectionResponse":
        b = detection.box
        name = class_names[detection.class_id] if detection.class_id < len(class_names) else str(detection.class_id)
        return cls(
            x1=b.x1, y1=b.y1, x2=b.x2, y2=b.y2,
            class_id=detection.class_id, class_name=name, score=detection.score,
        )


class DetectionListResponse(BaseModel):
    """Detections of one uploaded image."""

    image_id: str
    width: int
    height: int
    variant: str
    detections: List[DetectionResponse] = Field(default_factory=list)


class HealthResponse(BaseModel):
    status: str
    model_loaded: bool
    variant: Optional[str] = None
