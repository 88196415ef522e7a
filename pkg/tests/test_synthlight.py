"""
Tests for the synthetic low-light corpus and the illumination store.
"""

import json

import numpy as np
import pytest
from PIL import Image

from src.exceptions import DataValidationError, DecompositionLookupError, StorageError
from src.schemas.config_schemas import SynthConfig
from src.schemas.synth_schemas import CLASS_NAMES, IlluminationFieldSpec, SceneSpec
from src.services.illumination_store import (
    PrecomputedDecompositionStore,
    decode_npyf,
    encode_npyf,
    read_npyf,
)
from src.services.synthlight_service import (
    build_corpus,
    darken,
    generate_scene,
    load_manifest,
    render,
    split_ids,
    synthesize_field,
    verify_corpus,
)

pytestmark = pytest.mark.unit


TINY = SynthConfig(seed=3, num_train=2, num_val=1, num_test=1)


class TestRender:
    """Tests for clean scene rendering."""

    def test_boxes_inside_canvas(self):
        """Every object lies inside the image with a known class."""
        for seed in range(20):
            image, annotations = render(SceneSpec(seed=seed))
            assert image.shape == (3, 128, 128)
            assert 1 <= len(annotations) <= 8
            for annotation in annotations:
                assert annotation.within(128, 128)
                assert 0 <= annotation.class_id < len(CLASS_NAMES)

    def test_values_in_unit_range(self):
        """Clean pixels lie in [0, 1]."""
        image, _ = render(SceneSpec(seed=1))
        assert image.min() >= 0.0
        assert image.max() <= 1.0

    def test_fixed_object_count(self):
        """num_objects pins the count."""
        _, annotations = render(SceneSpec(seed=5, num_objects=3))
        assert len(annotations) == 3

    def test_deterministic(self):
        """The same seed renders the same scene."""
        a, boxes_a = render(SceneSpec(seed=11))
        b, boxes_b = render(SceneSpec(seed=11))
        assert np.array_equal(a, b)
        assert boxes_a == boxes_b

    def test_overlap_bound_holds(self):
        """No two placed objects overlap by more than max_overlap of the smaller one."""
        for seed in range(50):
            _, annotations = render(SceneSpec(seed=seed))
            boxes = [a.box for a in annotations]
            for i, a in enumerate(boxes):
                for b in boxes[i + 1:]:
                    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
                    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
                    if iw > 0 and ih > 0:
                        assert iw * ih / min(a.area, b.area) <= 0.5 + 1e-9

    def test_unplaceable_objects_rejected(self):
        """Two 100-pixel objects on a 128 canvas always overlap by more than half."""
        with pytest.raises(DataValidationError, match="could not place object 2 of 2"):
            render(SceneSpec(seed=0, num_objects=2, size_min=100, size_max=100))

    def test_oversized_objects_rejected(self):
        """Objects must fit on the canvas."""
        with pytest.raises(ValueError):
            SceneSpec(seed=0, height=32, width=32, size_max=40)


class TestIlluminationField:
    """Tests for the smooth lighting field."""

    def test_bounds_and_smoothness(self):
        """The field stays within its bounds and changes slowly."""
        for seed in range(10):
            spec = IlluminationFieldSpec(seed=seed, darkness=0.3)
            field = synthesize_field(spec)
            assert field.shape == (3, 128, 128)
            assert field.min() >= spec.illumination_min - 1e-7
            assert field.max() <= spec.illumination_max
            assert np.abs(np.diff(field, axis=1)).max() <= spec.max_gradient
            assert np.abs(np.diff(field, axis=2)).max() <= spec.max_gradient

    def test_uniform_without_lobes(self):
        """No lobes gives a flat field at the darkness level."""
        field = synthesize_field(IlluminationFieldSpec(seed=0, darkness=0.25, num_lobes=0))
        assert np.allclose(field, 0.25)

    def test_brightness_monotone_in_darkness(self):
        """A brighter global scalar never darkens the field or the scene."""
        clean, _ = render(SceneSpec(seed=4))
        field_means, image_means = [], []
        for darkness in np.linspace(0.05, 0.5, 10):
            field = synthesize_field(IlluminationFieldSpec(seed=4, darkness=float(darkness)))
            low_light, _ = darken(clean, field)
            field_means.append(field.mean())
            image_means.append(low_light.mean())
        assert np.all(np.diff(field_means) > 0)
        assert np.all(np.diff(image_means) > 0)

    def test_steep_field_rejected(self):
        """Narrow bright lobes break the gradient bound."""
        spec = IlluminationFieldSpec(seed=0, darkness=1.0, lobe_sigma_min=0.01, lobe_sigma_max=0.01, ambient=0.0)
        with pytest.raises(DataValidationError):
            synthesize_field(spec)


class TestDarken:
    """Tests for the multiplicative degradation."""

    def test_division_recovers_clean(self):
        """Without noise, low_light / illumination equals the clean scene."""
        config = SynthConfig(seed=2, noise_sigma=0.0)
        for index in range(5):
            scene = generate_scene(config, index)
            recovered = scene["low_light"] / scene["illumination"]
            assert np.abs(recovered - scene["clean"]).max() <= 1e-6

    def test_noise_stays_in_range(self):
        """Read noise is clipped to [0, 1]."""
        clean = np.full((3, 8, 8), 0.5, dtype=np.float32)
        field = np.full((3, 8, 8), 0.1, dtype=np.float32)
        low, _ = darken(clean, field, noise_sigma=0.2, rng=np.random.default_rng(0))
        assert low.min() >= 0.0
        assert low.max() <= 1.0

    def test_invalid_field_rejected(self):
        """Fields outside (0, 1] are refused."""
        clean = np.ones((3, 4, 4), dtype=np.float32)
        with pytest.raises(DataValidationError):
            darken(clean, np.zeros((3, 4, 4)))
        with pytest.raises(DataValidationError):
            darken(clean, np.full((3, 4, 4), 1.5))

    def test_shape_mismatch_rejected(self):
        """The field must match the image size."""
        with pytest.raises(DataValidationError):
            darken(np.ones((3, 4, 4)), np.full((3, 5, 5), 0.5))


class TestCorpus:
    """Tests for corpus generation and verification."""

    def test_splits_disjoint(self):
        """No image id appears in two splits."""
        splits = split_ids(SynthConfig(num_train=5, num_val=3, num_test=2))
        ids = [i for split in splits.values() for i in split]
        assert len(ids) == len(set(ids)) == 10

    def test_layout_and_manifest(self, tiny_corpus):
        """Images, clean scenes, illumination and annotations are written."""
        manifest = load_manifest(tiny_corpus)
        assert manifest["class_names"] == CLASS_NAMES
        assert len(manifest["splits"]["train"]) == 8
        first = manifest["splits"]["train"][0]
        for folder, suffix in (("images", "png"), ("clean", "png"), ("illum", "npyf"), ("raw", "npyf")):
            assert (tiny_corpus / folder / f"{first}.{suffix}").is_file()
        lines = (tiny_corpus / "annotations.jsonl").read_text().splitlines()
        assert len(lines) == 16
        assert json.loads(lines[0])["id"] == first

    def test_stored_arrays_recover_clean(self, tiny_corpus):
        """Stored raw low-light divided by stored illumination is the clean render."""
        config = SynthConfig(seed=7, num_train=8, num_val=4, num_test=4, noise_sigma=0.0)
        raw = read_npyf(tiny_corpus / "raw" / "000000.npyf")
        illumination = read_npyf(tiny_corpus / "illum" / "000000.npyf")
        clean = generate_scene(config, 0)["clean"]
        assert np.abs(raw / illumination - clean).max() <= 1e-6

    def test_regeneration_is_byte_identical(self, tmp_path):
        """The same seed writes the same bytes, regardless of worker count."""
        build_corpus(TINY, tmp_path / "a", workers=1)
        build_corpus(TINY, tmp_path / "b", workers=3)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_verify_detects_tampering(self, tmp_path):
        """A modified file no longer matches its checksum."""
        root = tmp_path / "corpus"
        build_corpus(TINY, root)
        assert verify_corpus(root) == []
        target = root / "images" / "000000.png"
        target.write_bytes(target.read_bytes() + b"\0")
        (root / "illum" / "000001.npyf").unlink()
        assert verify_corpus(root) == ["illum/000001.npyf", "images/000000.png"]

    def test_missing_manifest(self, tmp_path):
        """A directory without a manifest cannot be verified."""
        with pytest.raises(StorageError):
            verify_corpus(tmp_path)


class TestNpyf:
    """Tests for the float-array container."""

    def test_encode_decode(self):
        """Arrays survive serialization exactly."""
        array = np.random.default_rng(0).random((3, 5, 7)).astype(np.float32)
        assert np.array_equal(decode_npyf(encode_npyf(array)), array)

    def test_single_channel(self):
        """2-D arrays gain a channel axis."""
        decoded = decode_npyf(encode_npyf(np.ones((4, 6), dtype=np.float32)))
        assert decoded.shape == (1, 4, 6)

    def test_bad_magic(self):
        """Foreign bytes are rejected."""
        data = b"XXXX" + encode_npyf(np.ones((1, 2, 2)))[4:]
        with pytest.raises(DataValidationError):
            decode_npyf(data)

    def test_truncated_payload(self):
        """A payload that does not fill the planes is rejected."""
        with pytest.raises(DataValidationError):
            decode_npyf(encode_npyf(np.ones((1, 2, 2)))[:-1])

    def test_unsupported_channels(self):
        """Only 1 or 3 channels are allowed."""
        with pytest.raises(DataValidationError):
            encode_npyf(np.ones((2, 3, 3)))


class TestDecompositionStore:
    """Tests for the precomputed illumination store."""

    def test_save_and_load(self, tmp_path):
        """Saved maps are found by image id."""
        store = PrecomputedDecompositionStore(tmp_path)
        field = np.full((1, 4, 4), 0.5, dtype=np.float32)
        store.save("scene", field)
        assert "scene" in store
        assert np.array_equal(store.load("scene"), field)

    def test_npy_and_png(self, tmp_path):
        """.npy arrays and 16-bit grayscale PNGs are accepted."""
        np.save(tmp_path / "a.npy", np.full((4, 4), 0.25, dtype=np.float32))
        Image.fromarray(np.full((4, 4), 65535, dtype=np.uint16)).save(tmp_path / "b.png")
        store = PrecomputedDecompositionStore(tmp_path)
        assert len(store) == 2
        assert np.allclose(store.load("a"), 0.25)
        assert store.load("b").shape == (1, 4, 4)
        assert np.allclose(store.load("b"), 1.0)

    def test_png_scaled_by_bit_depth(self, tmp_path):
        """8-bit gray and RGB maps scale by 255, 16-bit gray by 65535."""
        Image.fromarray(np.full((4, 4), 128, dtype=np.uint8), mode="L").save(tmp_path / "gray8.png")
        Image.fromarray(np.full((4, 4, 3), 51, dtype=np.uint8), mode="RGB").save(tmp_path / "rgb.png")
        Image.fromarray(np.full((4, 4), 32768, dtype=np.uint16)).save(tmp_path / "gray16.png")
        store = PrecomputedDecompositionStore(tmp_path)
        assert np.allclose(store.load("gray8"), 128 / 255)
        assert store.load("rgb").shape == (3, 4, 4)
        assert np.allclose(store.load("rgb"), 0.2)
        assert np.allclose(store.load("gray16"), 32768 / 65535)

    def test_missing_entry(self, tmp_path):
        """Unknown ids raise a lookup error naming the image."""
        store = PrecomputedDecompositionStore(tmp_path)
        with pytest.raises(DecompositionLookupError) as exc_info:
            store.load("nope")
        assert exc_info.value.image_id == "nope"

    def test_missing_directory(self, tmp_path):
        """The store root must exist."""
        with pytest.raises(StorageError):
            PrecomputedDecompositionStore(tmp_path / "absent")
