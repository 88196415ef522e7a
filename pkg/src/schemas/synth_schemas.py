"""
Pydantic schemas for synthetic low-light scenes.
"""

from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, Field, model_validator


class ShapeClass(int, Enum):
    """Object classes rendered by the synthetic corpus."""
    DISK = 0
    SQUARE = 1
    TRIANGLE = 2
    RING = 3


CLASS_NAMES: List[str] = [shape.name.lower() for shape in ShapeClass]


class SceneSpec(BaseModel):
    """Everything needed to render one clean scene deterministically."""

    seed: int = Field(..., ge=0)
    height: int = Field(default=128, ge=32)
    width: int = Field(default=128, ge=32)
    num_objects: Optional[int] = Field(default=None, ge=1, le=8, description="None draws min..max objects")
    min_objects: int = Field(default=1, ge=1, le=8)
    max_objects: int = Field(default=8, ge=1, le=8)
    size_min: int = Field(default=10, ge=4)
    size_max: int = Field(default=48, ge=4)
    max_overlap: float = Field(default=0.5, ge=0.0, le=1.0)
    background_low: float = Field(default=0.15, ge=0.0, le=1.0)
    background_high: float = Field(default=0.45, ge=0.0, le=1.0)
    background_waves: int = Field(default=3, ge=0)

    @model_validator(mode="after")
    def validate_ranges(self):
        """Ranges must be ordered and objects must fit on the canvas."""
        if self.min_objects > self.max_objects:
            raise ValueError("min_objects must not exceed max_objects")
        if self.size_min > self.size_max:
            raise ValueError("size_min must not exceed size_max")
        if self.size_max >= min(self.height, self.width):
            raise ValueError("size_max must be smaller than the canvas")
        if self.background_low > self.background_high:
            raise ValueError("background_low must not exceed background_high")
        return self


class IlluminationFieldSpec(BaseModel):
    """Smooth multiplicative lighting field: Gaussian lobes scaled by a global darkness."""

    seed: int = Field(..., ge=0)
    height: int = Field(default=128, ge=1)
    width: int = Field(default=128, ge=1)
    darkness: float = Field(default=0.2, gt=0.0, le=1.0, description="Global darkness scalar")
    illumination_min: float = Field(default=0.02, gt=0.0, le=1.0)
    illumination_max: float = Field(default=1.0, gt=0.0, le=1.0)
    num_lobes: int = Field(default=4, ge=0)
    lobe_sigma_min: float = Field(default=0.25, gt=0.0)
    lobe_sigma_max: float = Field(default=0.6, gt=0.0)
    ambient: float = Field(default=0.35, ge=0.0, le=1.0, description="Share of light not coming from lobes")
    max_gradient: float = Field(default=0.05, gt=0.0)
    noise_sigma: float = Field(default=0.01, ge=0.0)

    @model_validator(mode="after")
    def validate_ranges(self):
        """Bounds of the field must be ordered."""
        if self.illumination_min > self.illumination_max:
            raise ValueError("illumination_min must not exceed illumination_max")
        if self.lobe_sigma_min > self.lobe_sigma_max:
            raise ValueError("lobe_sigma_min must not exceed lobe_sigma_max")
        return self


class CorpusObject(BaseModel):
    """One object of an annotation record."""

    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = Field(..., ge=0)


class CorpusRecord(BaseModel):
    """One line of ``annotations.jsonl``."""

    id: str
    objects: List[CorpusObject] = Field(default_factory=list)
