"""
Versioned, checksummed checkpoint container.

The outer ``torch.save`` object holds the format tag, the container version,
the sha256 of the payload and the payload bytes (itself a ``torch.save`` of
model/optimizer state, epoch, step, variant and config echo).
"""

import hashlib
import io
import logging
import pickle
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch

from src.config import parse_config_text, build_config
from src.exceptions import CheckpointIntegrityError, StorageError
from src.models.detector import LowLightDetector, build_model
from src.schemas.config_schemas import ExperimentConfig

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "t2-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class Checkpoint:
    """Everything needed to resume training or rebuild the detector."""

    model_state: Dict[str, torch.Tensor]
    config: ExperimentConfig
    variant: str
    epoch: int = 0
    step: int = 0
    optimizer_state: Optional[Dict[str, Any]] = None
    metrics: Dict[str, float] = field(default_factory=dict)

    def build(self) -> LowLightDetector:
        """Detector with the stored weights, in eval mode."""
        model = build_model(self.variant, self.config)
        model.load_state_dict(self.model_state)
        model.eval()
        return model


def _payload_bytes(checkpoint: Checkpoint) -> bytes:
    buffer = io.BytesIO()
    torch.save(
        {
            "model_state": checkpoint.model_state,
            "optimizer_state": checkpoint.optimizer_state,
            "epoch": checkpoint.epoch,
            "step": checkpoint.step,
            "variant": checkpoint.variant,
            "config": checkpoint.config.to_flat(),
            "metrics": dict(checkpoint.metrics),
        },
        buffer,
    )
    return buffer.getvalue()


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]) -> Path:
    """Write ``checkpoint`` atomically (temp file then rename)."""
    path = Path(path)
    payload = _payload_bytes(checkpoint)
    container = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "payload": payload,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(container, tmp)
        tmp.replace(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint ({exc})", str(path)) from exc
    logger.info("Saved checkpoint %s (epoch %d, step %d)", path, checkpoint.epoch, checkpoint.step)
    return path


def load_checkpoint(path: Union[str, Path], map_location: str = "cpu") -> Checkpoint:
    """Read and verify a checkpoint; refuses on checksum or version mismatch."""
    path = Path(path)
    try:
        container = torch.load(path, map_location=map_location, weights_only=False)
    except FileNotFoundError as exc:
        raise StorageError("checkpoint not found", str(path)) from exc
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as exc:
        raise CheckpointIntegrityError(f"unreadable checkpoint ({exc})", str(path)) from exc

    if not isinstance(container, dict) or container.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointIntegrityError("not a detector checkpoint", str(path))
    if container.get("version") != CHECKPOINT_VERSION:
        raise CheckpointIntegrityError(f"unsupported checkpoint version {container.get('version')}", str(path))
    payload = container.get("payload", b"")
    if hashlib.sha256(payload).hexdigest() != container.get("sha256"):
        raise CheckpointIntegrityError("checksum mismatch", str(path))

    state = torch.load(io.BytesIO(payload), map_location=map_location, weights_only=False)
    config = build_config(parse_config_text(state["config"], source=f"{path}:config"))
    return Checkpoint(
        model_state=state["model_state"],
        config=config,
        variant=state["variant"],
        epoch=state["epoch"],
        step=state["step"],
        optimizer_state=state.get("optimizer_state"),
        metrics=state.get("metrics", {}),
    )


def checkpoint_from_model(
    model: LowLightDetector,
    config: ExperimentConfig,
    epoch: int = 0,
    step: int = 0,
    optimizer: Optional[torch.optim.Optimizer] = None,
    metrics: Optional[Dict[str, float]] = None,
) -> Checkpoint:
    return Checkpoint(
        model_state={k: v.detach().clone() for k, v in model.state_dict().items()},
        config=config,
        variant=model.variant.value,
        epoch=epoch,
        step=step,
        optimizer_state=optimizer.state_dict() if optimizer is not None else None,
        metrics=dict(metrics or {}),
    )
