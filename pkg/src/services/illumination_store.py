"""
Float-array container (``.npyf``) and the precomputed decomposition store.

``.npyf`` layout, little-endian:

    bytes 0-3   magic b"T2IL"
    bytes 4-5   u16 height
    bytes 6-7   u16 width
    bytes 8-    float32 payload, C x height x width, C in {1, 3}
"""

import logging
import struct
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
from PIL import Image

from src.exceptions import DataValidationError, DecompositionLookupError, StorageError

logger = logging.getLogger(__name__)

NPYF_MAGIC = b"T2IL"
NPYF_HEADER = struct.Struct("<4sHH")
STORE_SUFFIXES = (".npyf", ".npy", ".png")
# Full-scale value per Pillow mode; 16-bit grayscale opens as "I;16" or "I".
PNG_SCALES = {"L": 255.0, "RGB": 255.0, "I;16": 65535.0, "I;16B": 65535.0, "I": 65535.0}


def encode_npyf(array: np.ndarray) -> bytes:
    """Serialize a ``(C, H, W)`` or ``(H, W)`` float array."""
    array = np.asarray(array, dtype="<f4")
    if array.ndim == 2:
        array = array[None]
    if array.ndim != 3 or array.shape[0] not in (1, 3):
        raise DataValidationError(f"npyf arrays must be (1|3, H, W), got {array.shape}")
    _, height, width = array.shape
    if height > 0xFFFF or width > 0xFFFF:
        raise DataValidationError(f"npyf dimensions exceed 65535: {height}x{width}")
    return NPYF_HEADER.pack(NPYF_MAGIC, height, width) + np.ascontiguousarray(array).tobytes()


def decode_npyf(data: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse ``.npyf`` bytes into a ``(C, H, W)`` float32 array."""
    if len(data) < NPYF_HEADER.size:
        raise DataValidationError(f"{source}: truncated npyf header")
    magic, height, width = NPYF_HEADER.unpack_from(data)
    if magic != NPYF_MAGIC:
        raise DataValidationError(f"{source}: bad magic {magic!r}")
    payload = data[NPYF_HEADER.size:]
    plane = height * width * 4
    if plane == 0 or len(payload) % plane or len(payload) // plane not in (1, 3):
        raise DataValidationError(f"{source}: payload of {len(payload)} bytes does not fit {height}x{width}")
    channels = len(payload) // plane
    return np.frombuffer(payload, dtype="<f4").reshape(channels, height, width).astype(np.float32)


def write_npyf(path: Union[str, Path], array: np.ndarray) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_npyf(array))
    except OSError as exc:
        raise StorageError(f"cannot write npyf ({exc})", str(path)) from exc
    return path


def read_npyf(path: Union[str, Path]) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StorageError(f"cannot read npyf ({exc})", str(path)) from exc
    return decode_npyf(data, source=str(path))


def read_illumination_png(path: Path) -> np.ndarray:
    """Grayscale or RGB PNG scaled to [0, 1] by its bit depth, channels first."""
    try:
        with Image.open(path) as img:
            mode = img.mode
            array = np.asarray(img, dtype=np.float64)
    except OSError as exc:
        raise StorageError(f"cannot read illumination image ({exc})", str(path)) from exc
    if mode not in PNG_SCALES:
        raise DataValidationError(f"unsupported illumination PNG mode '{mode}' in {path}")
    array = array.transpose(2, 0, 1) if array.ndim == 3 else array[None]
    return (array / PNG_SCALES[mode]).astype(np.float32)


class PrecomputedDecompositionStore:
    """Directory of illumination maps keyed by source-image file stem."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        if not self.root.is_dir():
            raise StorageError("illumination store directory does not exist", str(self.root))
        self._index: Optional[Dict[str, Path]] = None

    def _build_index(self) -> Dict[str, Path]:
        index: Dict[str, Path] = {}
        for suffix in STORE_SUFFIXES:
            for path in sorted(self.root.glob(f"*{suffix}")):
                index.setdefault(path.stem, path)
        return index

    @property
    def index(self) -> Dict[str, Path]:
        if self._index is None:
            self._index = self._build_index()
        return self._index

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.index

    def __len__(self) -> int:
        return len(self.index)

    def load(self, image_id: str) -> np.ndarray:
        """Illumination ``(C, H, W)`` for ``image_id``; raises if absent."""
        path = self.index.get(image_id)
        if path is None:
            raise DecompositionLookupError(image_id)
        if path.suffix == ".npyf":
            return read_npyf(path)
        if path.suffix == ".npy":
            try:
                array = np.load(path, allow_pickle=False).astype(np.float32)
            except (OSError, ValueError) as exc:
                raise StorageError(f"cannot read illumination array ({exc})", str(path)) from exc
            return array[None] if array.ndim == 2 else array
        return read_illumination_png(path)

    def save(self, image_id: str, illumination: np.ndarray) -> Path:
        """Store an illumination map as ``.npyf``."""
        path = write_npyf(self.root / f"{image_id}.npyf", illumination)
        self._index = None
        return path
