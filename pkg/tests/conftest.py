"""
Shared fixtures: a tiny synthetic corpus, a small fast experiment config and
one trained checkpoint reused by the evaluation, CLI and API tests.
"""

import json

import pytest

from src.schemas.config_schemas import ExperimentConfig, SynthConfig
from src.services.synthlight_service import build_corpus

SMALL_MODEL_OVERRIDES = {
    "model.sdm_width": 4,
    "model.backbone_widths": [4, 4, 8, 8, 8, 8, 8, 8],
    "model.pyramid_width": 8,
    "train.batch_size": 4,
    "train.epochs": 1,
    "train.warmup_steps": 0,
    "train.eval_every": 0,
    "train.log_every": 1,
    "eval.ablation_seeds": [0],
}


def override_args(overrides=None):
    """Render overrides as ``--section.key=value`` CLI flags."""
    merged = dict(SMALL_MODEL_OVERRIDES, **(overrides or {}))
    return [f"--{key}={json.dumps(value)}" for key, value in merged.items()]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Eight training, four validation and four test scenes without read noise."""
    root = tmp_path_factory.mktemp("synthlight")
    build_corpus(SynthConfig(seed=7, num_train=8, num_val=4, num_test=4, noise_sigma=0.0), root)
    return root


@pytest.fixture
def small_config():
    """Experiment config with narrow layers so a training step takes milliseconds."""
    return ExperimentConfig().with_overrides(SMALL_MODEL_OVERRIDES)


@pytest.fixture(scope="session")
def trained_run(tiny_corpus, tmp_path_factory):
    """One epoch of the full T2 variant on the tiny corpus."""
    from src.services.training_service import train

    config = ExperimentConfig().with_overrides(SMALL_MODEL_OVERRIDES)
    return train(config, tiny_corpus, run_dir=tmp_path_factory.mktemp("run-T2"))


@pytest.fixture
def stray_class_corpus(tmp_path):
    """A small corpus whose first training object claims class 7."""
    root = tmp_path / "stray"
    build_corpus(SynthConfig(seed=5, num_train=2, num_val=1, num_test=1, noise_sigma=0.0), root)
    path = root / "annotations.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    records[0]["objects"][0]["class_id"] = 7
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    return root
