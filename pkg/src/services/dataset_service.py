"""
Dataset loading for the on-disk corpus layout (synthetic or converted real data).
"""

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch.utils.data import Dataset

from src.exceptions import DataValidationError, StorageError
from src.schemas.config_schemas import DataConfig
from src.schemas.detection_schemas import Annotation, Box
from src.schemas.synth_schemas import CorpusRecord
from src.services.synthlight_service import load_manifest

logger = logging.getLogger(__name__)

MIN_BOX_SIDE = 2.0
MIN_KEPT_FRACTION = 0.5


@dataclass
class Sample:
    """One image with boxes ``(G, 4)`` and labels ``(G,)`` in the resized frame."""

    image: torch.Tensor
    boxes: torch.Tensor
    labels: torch.Tensor
    image_id: str


@dataclass
class Batch:
    """Collated samples."""

    images: torch.Tensor
    boxes: List[torch.Tensor]
    labels: List[torch.Tensor]
    image_ids: List[str]

    def __len__(self) -> int:
        return len(self.image_ids)

    @property
    def batch_id(self) -> str:
        return ",".join(self.image_ids)


def collate_samples(samples: Sequence[Sample]) -> Batch:
    return Batch(
        images=torch.stack([s.image for s in samples]),
        boxes=[s.boxes for s in samples],
        labels=[s.labels for s in samples],
        image_ids=[s.image_id for s in samples],
    )


def read_image(path: Union[str, Path]) -> np.ndarray:
    """8-bit RGB image as ``(3, H, W)`` float32 in [0, 1]."""
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise StorageError(f"cannot read image ({exc})", str(path)) from exc
    return array.transpose(2, 0, 1).copy()


def resize_tensor(image: torch.Tensor, height: int, width: int) -> torch.Tensor:
    """Bilinear resize of ``(3, H, W)``; identity when the size already matches."""
    if tuple(image.shape[-2:]) == (height, width):
        return image
    resized = F.interpolate(image.unsqueeze(0), size=(height, width), mode="bilinear", align_corners=False)
    return resized.squeeze(0).clamp(0.0, 1.0)


def scale_boxes(boxes: torch.Tensor, sx: float, sy: float) -> torch.Tensor:
    if boxes.numel() == 0:
        return boxes
    return boxes * torch.tensor([sx, sy, sx, sy], dtype=boxes.dtype)


def read_annotation_records(root: Union[str, Path]) -> Dict[str, CorpusRecord]:
    """Records of ``annotations.jsonl`` keyed by image id."""
    path = Path(root) / "annotations.jsonl"
    records: Dict[str, CorpusRecord] = {}
    try:
        with path.open(encoding="utf-8") as handle:
            for lineno, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    record = CorpusRecord.model_validate(json.loads(line))
                except ValueError as exc:
                    raise DataValidationError(f"{path}:{lineno}: invalid annotation record ({exc})") from exc
                records[record.id] = record
    except OSError as exc:
        raise StorageError(f"cannot read annotations ({exc})", str(path)) from exc
    return records


class LowLightDataset(Dataset):
    """Images of one split, resized to ``resize x resize``, with optional augmentation."""

    def __init__(
        self,
        root: Union[str, Path],
        split: str,
        resize: Optional[int] = 128,
        augment: bool = False,
        config: Optional[DataConfig] = None,
        seed: int = 0,
        num_classes: Optional[int] = None,
    ):
        self.root = Path(root)
        self.split = split
        self.resize = resize
        self.config = config or DataConfig()
        self.augment = augment
        self.seed = seed
        self.epoch = 0
        self.manifest = load_manifest(self.root)
        splits = self.manifest.get("splits", {})
        if split not in splits:
            raise DataValidationError(f"split '{split}' not in manifest (have {sorted(splits)})")
        self.image_ids: List[str] = list(splits[split])
        self.class_names: List[str] = list(self.manifest.get("class_names", []))
        self.records = read_annotation_records(self.root)
        missing = [i for i in self.image_ids if i not in self.records]
        if missing:
            raise DataValidationError(f"{len(missing)} images of split '{split}' have no annotation record")
        if num_classes is not None:
            self.check_class_ids(num_classes)

    def check_class_ids(self, num_classes: int) -> None:
        """Every object of the split must carry a class id in ``[0, num_classes)``."""
        for image_id in self.image_ids:
            for obj in self.records[image_id].objects:
                if not 0 <= obj.class_id < num_classes:
                    raise DataValidationError(
                        f"image '{image_id}' has class_id {obj.class_id}, "
                        f"outside [0, {num_classes}) of split '{self.split}'"
                    )

    def __len__(self) -> int:
        return len(self.image_ids)

    def set_epoch(self, epoch: int) -> None:
        """Augmentation draws depend on (seed, epoch, index) only."""
        self.epoch = epoch

    def raw_sample(self, index: int) -> Sample:
        image_id = self.image_ids[index]
        image = torch.from_numpy(read_image(self.root / "images" / f"{image_id}.png"))
        record = self.records[image_id]
        boxes = torch.tensor([[o.x1, o.y1, o.x2, o.y2] for o in record.objects], dtype=torch.float32).reshape(-1, 4)
        labels = torch.tensor([o.class_id for o in record.objects], dtype=torch.long)
        return Sample(image=image, boxes=boxes, labels=labels, image_id=image_id)

    def __getitem__(self, index: int) -> Sample:
        sample = self.raw_sample(index)
        if self.augment:
            rng = np.random.default_rng([self.seed, self.epoch, index])
            sample = self._augment(sample, rng)
        if self.resize:
            height, width = sample.image.shape[-2:]
            sample = Sample(
                image=resize_tensor(sample.image, self.resize, self.resize),
                boxes=scale_boxes(sample.boxes, self.resize / width, self.resize / height),
                labels=sample.labels,
                image_id=sample.image_id,
            )
        return sample

    def _augment(self, sample: Sample, rng: np.random.Generator) -> Sample:
        image, boxes, labels = sample.image, sample.boxes, sample.labels
        height, width = image.shape[-2:]
        if rng.uniform() < self.config.crop_prob:
            scale = rng.uniform(self.config.crop_min_scale, 1.0)
            crop_h, crop_w = max(1, int(round(height * scale))), max(1, int(round(width * scale)))
            top = int(rng.integers(0, height - crop_h + 1))
            left = int(rng.integers(0, width - crop_w + 1))
            image = image[:, top:top + crop_h, left:left + crop_w]
            if boxes.numel():
                shifted = boxes - torch.tensor([left, top, left, top], dtype=boxes.dtype)
                clipped = torch.stack([
                    shifted[:, 0].clamp(0, crop_w), shifted[:, 1].clamp(0, crop_h),
                    shifted[:, 2].clamp(0, crop_w), shifted[:, 3].clamp(0, crop_h),
                ], dim=1)
                area = (shifted[:, 2] - shifted[:, 0]) * (shifted[:, 3] - shifted[:, 1])
                kept_area = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
                keep = (
                    (clipped[:, 2] - clipped[:, 0] >= MIN_BOX_SIDE)
                    & (clipped[:, 3] - clipped[:, 1] >= MIN_BOX_SIDE)
                    & (kept_area >= MIN_KEPT_FRACTION * area)
                )
                boxes, labels = clipped[keep], labels[keep]
            image = resize_tensor(image, height, width)
            boxes = scale_boxes(boxes, width / crop_w, height / crop_h)
        if rng.uniform() < self.config.flip_prob:
            image = image.flip(-1)
            if boxes.numel():
                boxes = torch.stack([width - boxes[:, 2], boxes[:, 1], width - boxes[:, 0], boxes[:, 3]], dim=1)
        return Sample(image=image.contiguous(), boxes=boxes, labels=labels, image_id=sample.image_id)

    def annotations(self) -> List[Annotation]:
        """Ground truth of the whole split in the resized frame."""
        truths: List[Annotation] = []
        for index, image_id in enumerate(self.image_ids):
            record = self.records[image_id]
            sx = sy = 1.0
            if self.resize:
                height, width = self.manifest_size(index)
                sx, sy = self.resize / width, self.resize / height
            for o in record.objects:
                truths.append(Annotation(
                    box=Box(x1=o.x1 * sx, y1=o.y1 * sy, x2=o.x2 * sx, y2=o.y2 * sy),
                    class_id=o.class_id,
                    image_id=image_id,
                ))
        return truths

    def manifest_size(self, index: int) -> Tuple[int, int]:
        """Source size of an image; read from disk when the manifest has none."""
        size = self.manifest.get("image_size")
        if size:
            return int(size[0]), int(size[1])
        with Image.open(self.root / "images" / f"{self.image_ids[index]}.png") as img:
            return img.height, img.width


def decode_image_bytes(data: bytes) -> np.ndarray:
    """Encoded image bytes (PNG, JPEG, ...) as ``(3, H, W)`` float32 in [0, 1]."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataValidationError(f"cannot decode image ({exc})") from exc
    return array.transpose(2, 0, 1).copy()


def prepare_detection_input(image: torch.Tensor, resize: Optional[int]) -> Tuple[torch.Tensor, float, float]:
    """Resize to ``resize`` (or the nearest multiple of 128) and return the scale factors."""
    height, width = image.shape[-2:]
    if resize:
        target_h = target_w = resize
    else:
        target_h = max(128, int(round(height / 128)) * 128)
        target_w = max(128, int(round(width / 128)) * 128)
    resized = resize_tensor(image, target_h, target_w)
    return resized, width / target_w, height / target_h
