"""
Training loop: seeded data order, SGD/Adam with linear warmup, metric log,
periodic validation and the final checkpoint.
"""

import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Union

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader

from src.config import settings
from src.exceptions import DataValidationError, EmptySplitError, StorageError, TrainingDivergenceError
from src.models.detector import LowLightDetector, build_model
from src.schemas.config_schemas import ExperimentConfig, OptimizerName, TrainConfig
from src.services.anchor_service import MatchResult, match
from src.services.checkpoint_service import Checkpoint, checkpoint_from_model, save_checkpoint
from src.services.dataset_service import Batch, LowLightDataset, collate_samples
from src.services.loss_service import LossBreakdown, detection_loss
from src.services.report_service import evaluate_model

logger = logging.getLogger(__name__)

DEFAULT_OVERFIT_STEPS = 500


@dataclass
class TrainResult:
    """Outcome of one training run."""

    checkpoint: Checkpoint
    run_dir: Path
    checkpoint_path: Path
    metrics: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def final_loss(self) -> Optional[float]:
        steps = [m for m in self.metrics if m["kind"] == "step"]
        return steps[-1]["loss"] if steps else None


class MetricLog:
    """Append-only ``metrics.jsonl`` with sorted keys."""

    def __init__(self, path: Optional[Path] = None):
        self.path = path
        self.records: List[Dict[str, Any]] = []
        if path is not None:
            try:
                path.parent.mkdir(parents=True, exist_ok=True)
                path.write_text("", encoding="utf-8")
            except OSError as exc:
                raise StorageError(f"cannot create metric log ({exc})", str(path)) from exc

    def write(self, record: Dict[str, Any]) -> None:
        self.records.append(record)
        if self.path is None:
            return
        try:
            with self.path.open("a", encoding="utf-8") as handle:
                handle.write(json.dumps(record, sort_keys=True) + "\n")
        except OSError as exc:
            raise StorageError(f"cannot append to metric log ({exc})", str(self.path)) from exc


def seed_everything(seed: int) -> None:
    """Seed every generator the run touches and pin deterministic kernels."""
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def run_dir_for(config: ExperimentConfig, runs_root: Optional[Union[str, Path]] = None) -> Path:
    root = Path(runs_root or settings.T2_RUNS_DIR)
    return root / f"{config.train.variant.value}-seed{config.train.seed}"


def build_optimizer(model: torch.nn.Module, config: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == OptimizerName.ADAM:
        return torch.optim.Adam(params, lr=config.learning_rate, weight_decay=config.weight_decay)
    return torch.optim.SGD(
        params, lr=config.learning_rate, momentum=config.momentum, weight_decay=config.weight_decay
    )


def warmup_schedule(optimizer: torch.optim.Optimizer, warmup_steps: int) -> LambdaLR:
    """Linear warmup to the base rate, constant afterwards."""
    def factor(step: int) -> float:
        if warmup_steps <= 0 or step >= warmup_steps:
            return 1.0
        return (step + 1) / warmup_steps

    return LambdaLR(optimizer, lr_lambda=factor)


def match_batch(model: LowLightDetector, batch: Batch) -> List[MatchResult]:
    anchors = model.anchors(batch.images.shape[-2], batch.images.shape[-1])
    cfg = model.anchor_config
    return [match(anchors, boxes, cfg.iou_threshold, cfg.ignore_iou) for boxes in batch.boxes]


def train_step(
    model: LowLightDetector,
    batch: Batch,
    optimizer: torch.optim.Optimizer,
    config: ExperimentConfig,
    step: int,
) -> LossBreakdown:
    """One optimization step; divergence errors carry the step index."""
    device = next(model.parameters()).device
    model.train()
    images = batch.images.to(device)
    outputs = model(images, batch.image_ids)
    anchors = model.anchors(images.shape[-2], images.shape[-1])
    try:
        losses = detection_loss(
            outputs,
            match_batch(model, batch),
            batch.boxes,
            batch.labels,
            anchors,
            config.loss,
            config.anchors.variances,
            batch_id=batch.batch_id,
        )
    except TrainingDivergenceError as exc:
        exc.step = step
        logger.error("Loss diverged at step %d (batch %s)", step, batch.batch_id)
        raise
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    optimizer.step()
    return losses


def _batches(loader: DataLoader, dataset: LowLightDataset, epoch: int) -> Iterator[Batch]:
    dataset.set_epoch(epoch)
    yield from loader


def train(
    config: ExperimentConfig,
    data_root: Union[str, Path],
    run_dir: Optional[Union[str, Path]] = None,
    model: Optional[LowLightDetector] = None,
) -> TrainResult:
    """Train one variant and persist ``config.txt``, ``metrics.jsonl`` and ``checkpoint.pt``."""
    tc = config.train
    seed_everything(tc.seed)
    run_dir = Path(run_dir) if run_dir is not None else run_dir_for(config)
    try:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.txt").write_text(config.to_flat(), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot prepare run directory ({exc})", str(run_dir)) from exc

    device = torch.device(settings.DEVICE)
    model = (model or build_model(tc.variant, config)).to(device)
    augment = config.data.augment and not tc.overfit_batch
    if augment and model.uses_external_decomposer:
        logger.info("Augmentation disabled: stored illumination maps are aligned with unaugmented images")
        augment = False

    dataset = LowLightDataset(
        data_root, config.data.train_split, resize=tc.resize, augment=augment, config=config.data, seed=tc.seed,
        num_classes=config.model.num_classes,
    )
    if len(dataset) == 0:
        raise EmptySplitError(f"training split '{config.data.train_split}' is empty")
    loader = DataLoader(
        dataset,
        batch_size=tc.batch_size,
        shuffle=not tc.overfit_batch,
        generator=torch.Generator().manual_seed(tc.seed),
        collate_fn=collate_samples,
        num_workers=config.data.num_workers,
        # a trailing single-image batch cannot be batch-normalized at the coarsest level
        drop_last=len(dataset) % tc.batch_size == 1,
    )
    val_set = None
    if tc.eval_every and not tc.overfit_batch:
        try:
            val_set = LowLightDataset(
                data_root, config.data.val_split, resize=config.eval.test_resize, config=config.data,
                num_classes=config.model.num_classes,
            )
        except (DataValidationError, StorageError) as exc:
            logger.warning("Validation disabled: %s", exc)

    optimizer = build_optimizer(model, tc)
    scheduler = warmup_schedule(optimizer, tc.warmup_steps)
    log = MetricLog(run_dir / "metrics.jsonl")
    max_steps = tc.max_steps or (DEFAULT_OVERFIT_STEPS if tc.overfit_batch else None)
    logger.info(
        "Training variant %s: %d images, batch %d, optimizer %s, lr %g",
        tc.variant.value, len(dataset), tc.batch_size, tc.optimizer.value, tc.learning_rate,
    )

    step = 0
    epoch = 0
    last_loss = float("nan")
    fixed_batch = next(iter(loader)) if tc.overfit_batch else None
    done = False
    while not done:
        batches = [fixed_batch] if fixed_batch is not None else _batches(loader, dataset, epoch)
        epoch_losses: List[float] = []
        for batch in batches:
            lr = optimizer.param_groups[0]["lr"] if optimizer.param_groups else 0.0
            losses = train_step(model, batch, optimizer, config, step)
            scheduler.step()
            last_loss = losses.total.item()
            epoch_losses.append(last_loss)
            if step % tc.log_every == 0 or tc.overfit_batch:
                log.write({"kind": "step", "step": step, "epoch": epoch, "lr": lr, **losses.as_dict()})
                logger.debug("step %d loss %.5f", step, losses.total.item())
            step += 1
            if max_steps is not None and step >= max_steps:
                done = True
                break
        if fixed_batch is None:
            logger.info(
                "Epoch %d: mean loss %.5f over %d steps",
                epoch, float(np.mean(epoch_losses)) if epoch_losses else float("nan"), len(epoch_losses),
            )
            if val_set is not None and len(val_set) and (epoch + 1) % tc.eval_every == 0:
                report, _ = evaluate_model(model, val_set, config, split=config.data.val_split)
                log.write({"kind": "eval", "epoch": epoch, "step": step, "map": report.mean_ap})
                logger.info("Epoch %d: validation mAP %.4f", epoch, report.mean_ap)
            epoch += 1
            if epoch >= tc.epochs:
                done = True

    checkpoint = checkpoint_from_model(
        model, config, epoch=epoch, step=step, optimizer=optimizer,
        metrics={"final_loss": last_loss},
    )
    checkpoint_path = save_checkpoint(checkpoint, run_dir / "checkpoint.pt")
    return TrainResult(checkpoint=checkpoint, run_dir=run_dir, checkpoint_path=checkpoint_path, metrics=log.records)
