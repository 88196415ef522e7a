"""
Synthetic low-light corpus with known ground-truth illumination.

A scene is rendered clean, multiplied by a smooth illumination field and
optionally perturbed by read noise. The field is stored next to the image so
the Retinex split can be audited exactly.
"""

import hashlib
import json
import logging
from io import BytesIO
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image, ImageDraw

from src.exceptions import DataValidationError, StorageError
from src.schemas.config_schemas import SynthConfig
from src.schemas.detection_schemas import Annotation, Box
from src.schemas.synth_schemas import (
    CLASS_NAMES,
    CorpusObject,
    CorpusRecord,
    IlluminationFieldSpec,
    SceneSpec,
    ShapeClass,
)
from src.services.illumination_store import encode_npyf

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PLACEMENT_ATTEMPTS = 200
SHRINK_EVERY = 25


def _overlap_fraction(a: Tuple[int, int, int, int], b: Tuple[int, int, int, int]) -> float:
    """Intersection over the smaller box's area."""
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def _background(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency textured background ``(H, W, 3)``."""
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    base = rng.uniform(spec.background_low, spec.background_high, size=3)
    canvas = np.broadcast_to(base, (spec.height, spec.width, 3)).copy()
    for _ in range(spec.background_waves):
        fx, fy = rng.uniform(0.5, 2.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amplitude = rng.uniform(0.02, 0.06, size=3)
        wave = np.sin(2 * np.pi * (fx * xx / spec.width + fy * yy / spec.height) + phase)
        canvas += wave[..., None] * amplitude
    return np.clip(canvas, 0.0, 1.0)


def _shape_mask(shape: ShapeClass, x0: int, y0: int, size: int, height: int, width: int) -> np.ndarray:
    mask = Image.new("L", (width, height), 0)
    draw = ImageDraw.Draw(mask)
    bbox = [x0, y0, x0 + size - 1, y0 + size - 1]
    if shape == ShapeClass.DISK:
        draw.ellipse(bbox, fill=255)
    elif shape == ShapeClass.SQUARE:
        draw.rectangle(bbox, fill=255)
    elif shape == ShapeClass.TRIANGLE:
        draw.polygon([(x0 + (size - 1) / 2, y0), (x0, y0 + size - 1), (x0 + size - 1, y0 + size - 1)], fill=255)
    else:
        draw.ellipse(bbox, outline=255, width=max(2, size // 5))
    return np.asarray(mask) > 0


def render(spec: SceneSpec) -> Tuple[np.ndarray, List[Annotation]]:
    """Render a clean scene ``(3, H, W)`` in [0, 1] and its tight annotations."""
    rng = np.random.default_rng(spec.seed)
    canvas = _background(spec, rng)
    if spec.num_objects is not None:
        count = spec.num_objects
    else:
        count = int(rng.integers(spec.min_objects, spec.max_objects + 1))

    placed: List[Tuple[int, int, int, int]] = []
    annotations: List[Annotation] = []
    for _ in range(count):
        shape = ShapeClass(int(rng.integers(0, len(ShapeClass))))
        color = rng.uniform(0.45, 1.0, size=3)
        size = int(rng.integers(spec.size_min, spec.size_max + 1))
        for attempt in range(PLACEMENT_ATTEMPTS):
            if attempt and attempt % SHRINK_EVERY == 0:
                size = max(spec.size_min, int(size * 0.8))
            x0 = int(rng.integers(0, spec.width - size + 1))
            y0 = int(rng.integers(0, spec.height - size + 1))
            candidate = (x0, y0, x0 + size, y0 + size)
            if all(_overlap_fraction(candidate, other) <= spec.max_overlap for other in placed):
                break
        else:
            raise DataValidationError(
                f"scene {spec.seed}: could not place object {len(placed) + 1} of {count} "
                f"within max_overlap={spec.max_overlap} after {PLACEMENT_ATTEMPTS} attempts"
            )
        placed.append(candidate)
        mask = _shape_mask(shape, x0, y0, size, spec.height, spec.width)
        canvas[mask] = color
        ys, xs = np.nonzero(mask)
        annotations.append(Annotation(
            box=Box(x1=float(xs.min()), y1=float(ys.min()), x2=float(xs.max() + 1), y2=float(ys.max() + 1)),
            class_id=int(shape),
        ))
    return canvas.transpose(2, 0, 1).astype(np.float32), annotations


def synthesize_field(spec: IlluminationFieldSpec) -> np.ndarray:
    """Smooth 3-channel illumination ``(3, H, W)`` within the configured bounds."""
    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
    yy /= max(spec.height, 1)
    xx /= max(spec.width, 1)
    lobes = np.zeros((spec.height, spec.width))
    for _ in range(spec.num_lobes):
        cx, cy = rng.uniform(0.0, 1.0, size=2)
        sigma = rng.uniform(spec.lobe_sigma_min, spec.lobe_sigma_max)
        amplitude = rng.uniform(0.5, 1.0)
        lobes += amplitude * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma ** 2))
    if lobes.max() > 0:
        lobes /= lobes.max()
    shape = spec.ambient + (1.0 - spec.ambient) * lobes if spec.num_lobes else np.ones_like(lobes)
    field = np.clip(spec.darkness * shape, spec.illumination_min, spec.illumination_max)
    steepest = max(
        np.abs(np.diff(field, axis=0)).max(initial=0.0),
        np.abs(np.diff(field, axis=1)).max(initial=0.0),
    )
    if steepest > spec.max_gradient:
        raise DataValidationError(
            f"illumination field changes by {steepest:.4f} per pixel, above the bound {spec.max_gradient}"
        )
    return np.broadcast_to(field, (3, spec.height, spec.width)).astype(np.float32)


def darken(
    clean: np.ndarray,
    field: np.ndarray,
    noise_sigma: float = 0.0,
    rng: Optional[np.random.Generator] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Apply ``low_light = clean * field`` plus optional Gaussian read noise."""
    clean = np.asarray(clean, dtype=np.float32)
    field = np.asarray(field, dtype=np.float32)
    if field.shape != clean.shape and field.shape != (1,) + clean.shape[1:]:
        raise DataValidationError(f"field shape {field.shape} does not match image shape {clean.shape}")
    if not np.isfinite(field).all() or field.min() <= 0 or field.max() > 1:
        raise DataValidationError(
            f"illumination field must lie in (0, 1], got [{field.min():.6g}, {field.max():.6g}]"
        )
    low_light = clean * field
    if noise_sigma > 0:
        rng = rng or np.random.default_rng()
        low_light = np.clip(low_light + rng.normal(0.0, noise_sigma, size=low_light.shape), 0.0, 1.0)
    return low_light.astype(np.float32), np.broadcast_to(field, clean.shape).astype(np.float32)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """``(3, H, W)`` in [0, 1] to ``(H, W, 3)`` uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def png_bytes(image: np.ndarray) -> bytes:
    buffer = BytesIO()
    Image.fromarray(np.ascontiguousarray(to_uint8(image))).save(buffer, format="PNG")
    return buffer.getvalue()


def scene_seeds(seed: int, index: int) -> Tuple[int, int, int]:
    """Independent scene, field and noise seeds for one corpus entry."""
    state = np.random.SeedSequence([seed, index]).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def split_ids(config: SynthConfig) -> Dict[str, List[str]]:
    """Disjoint image ids per split."""
    counts = [("train", config.num_train), ("val", config.num_val), ("test", config.num_test)]
    splits: Dict[str, List[str]] = {}
    offset = 0
    for name, count in counts:
        splits[name] = [f"{offset + i:06d}" for i in range(count)]
        offset += count
    return splits


def generate_scene(config: SynthConfig, index: int) -> Dict[str, object]:
    """Render, darken and encode one corpus entry."""
    scene_seed, field_seed, noise_seed = scene_seeds(config.seed, index)
    scene = SceneSpec(
        seed=scene_seed,
        height=config.height,
        width=config.width,
        min_objects=config.min_objects,
        max_objects=config.max_objects,
        size_min=config.size_min,
        size_max=config.size_max,
        max_overlap=config.max_overlap,
    )
    clean, annotations = render(scene)
    darkness = float(np.random.default_rng(field_seed).uniform(config.darkness_min, config.darkness_max))
    field_spec = IlluminationFieldSpec(
        seed=field_seed,
        height=config.height,
        width=config.width,
        darkness=darkness,
        illumination_min=config.illumination_min,
        illumination_max=config.illumination_max,
        num_lobes=config.num_lobes,
        lobe_sigma_min=config.lobe_sigma_min,
        lobe_sigma_max=config.lobe_sigma_max,
        max_gradient=config.max_gradient,
        noise_sigma=config.noise_sigma,
    )
    field = synthesize_field(field_spec)
    low_light, gt_illumination = darken(clean, field, config.noise_sigma, np.random.default_rng(noise_seed))
    return {
        "clean": clean,
        "low_light": low_light,
        "illumination": gt_illumination,
        "annotations": annotations,
    }


def _write(path: Path, data: bytes) -> str:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    except OSError as exc:
        raise StorageError(f"cannot write corpus file ({exc})", str(path)) from exc
    return hashlib.sha256(data).hexdigest()


def build_corpus(config: SynthConfig, out_dir: Union[str, Path], workers: int = 1) -> Dict[str, object]:
    """Write the corpus layout under ``out_dir`` and return the manifest."""
    out_dir = Path(out_dir)
    splits = split_ids(config)
    all_ids = [image_id for ids in splits.values() for image_id in ids]
    logger.info("Building synthetic corpus: %d images into %s", len(all_ids), out_dir)

    def produce(index: int) -> Tuple[str, Dict[str, str], CorpusRecord]:
        image_id = all_ids[index]
        scene = generate_scene(config, index)
        files = {
            f"images/{image_id}.png": png_bytes(scene["low_light"]),
            f"clean/{image_id}.png": png_bytes(scene["clean"]),
            f"illum/{image_id}.npyf": encode_npyf(scene["illumination"]),
        }
        if config.store_raw:
            files[f"raw/{image_id}.npyf"] = encode_npyf(scene["low_light"])
        checksums = {name: _write(out_dir / name, data) for name, data in files.items()}
        record = CorpusRecord(
            id=image_id,
            objects=[CorpusObject(**a.box.model_dump(), class_id=a.class_id) for a in scene["annotations"]],
        )
        return image_id, checksums, record

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(produce, range(len(all_ids))))

    checksums: Dict[str, str] = {}
    lines = []
    for index, (image_id, files, record) in enumerate(results):
        checksums.update(files)
        lines.append(json.dumps(record.model_dump(), sort_keys=True))
        if (index + 1) % 100 == 0:
            logger.info("Generated %d/%d scenes", index + 1, len(all_ids))
    checksums["annotations.jsonl"] = _write(out_dir / "annotations.jsonl", ("\n".join(lines) + "\n").encode())

    manifest = {
        "version": MANIFEST_VERSION,
        "seed": config.seed,
        "config": config.model_dump(),
        "class_names": CLASS_NAMES,
        "image_size": [config.height, config.width],
        "splits": splits,
        "checksums": dict(sorted(checksums.items())),
    }
    _write(out_dir / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
    logger.info("Corpus written to %s", out_dir)
    return manifest


def load_manifest(root: Union[str, Path]) -> Dict[str, object]:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise StorageError(f"cannot read manifest ({exc})", str(path)) from exc
    except json.JSONDecodeError as exc:
        raise DataValidationError(f"manifest {path} is not valid JSON: {exc}") from exc


def verify_corpus(root: Union[str, Path]) -> List[str]:
    """Relative paths whose content no longer matches the manifest checksum."""
    root = Path(root)
    manifest = load_manifest(root)
    mismatched = []
    for name, digest in manifest.get("checksums", {}).items():
        path = root / name
        try:
            actual = hashlib.sha256(path.read_bytes()).hexdigest()
        except OSError:
            mismatched.append(name)
            continue
        if actual != digest:
            mismatched.append(name)
    return mismatched
