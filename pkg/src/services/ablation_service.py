"""
Ablation runner: every variant trained and evaluated under one budget for
several seeds, summarized as mean and min/max spread.
"""

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from src.exceptions import StorageError, T2Error
from src.schemas.config_schemas import VARIANT_DESCRIPTIONS, ExperimentConfig, Variant
from src.services.dataset_service import LowLightDataset
from src.services.report_service import evaluate_model
from src.services.training_service import train

logger = logging.getLogger(__name__)

ABLATION_ORDER: Sequence[Variant] = (Variant.A, Variant.B, Variant.C, Variant.D, Variant.E, Variant.T2)


@dataclass
class AblationRow:
    """mAP of one variant over the seeds that completed."""

    variant: Variant
    maps: Dict[int, float] = field(default_factory=dict)
    failures: Dict[int, str] = field(default_factory=dict)

    @property
    def mean(self) -> Optional[float]:
        return float(np.mean(list(self.maps.values()))) if self.maps else None

    @property
    def minimum(self) -> Optional[float]:
        return min(self.maps.values()) if self.maps else None

    @property
    def maximum(self) -> Optional[float]:
        return max(self.maps.values()) if self.maps else None

    @property
    def failure(self) -> str:
        return "; ".join(f"seed {seed}: {msg}" for seed, msg in sorted(self.failures.items()))


@dataclass
class AblationTable:
    rows: List[AblationRow]
    seeds: List[int]

    def row(self, variant: Variant) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    @property
    def complete(self) -> bool:
        return not any(r.failures for r in self.rows)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def run_ablation(
    config: ExperimentConfig,
    data_root: Union[str, Path],
    out_dir: Union[str, Path],
    variants: Sequence[Variant] = ABLATION_ORDER,
    trainer: Callable = train,
) -> AblationTable:
    """Train and evaluate each variant for every seed in ``eval.ablation_seeds``.

    A failing run is recorded against its variant and seed; the remaining runs
    still execute so the table is partial rather than absent.
    """
    out_dir = Path(out_dir)
    seeds = list(config.eval.ablation_seeds)
    test_set = LowLightDataset(
        data_root, config.data.test_split, resize=config.eval.test_resize, config=config.data,
        num_classes=config.model.num_classes,
    )
    rows: List[AblationRow] = []
    for variant in variants:
        row = AblationRow(variant=variant)
        for seed in seeds:
            run_config = config.with_overrides({"train.variant": variant.value, "train.seed": seed})
            run_dir = out_dir / f"{variant.value}-seed{seed}"
            try:
                result = trainer(run_config, data_root, run_dir=run_dir)
                model = result.checkpoint.build()
                report, _ = evaluate_model(model, test_set, run_config, split=config.data.test_split)
            except (T2Error, RuntimeError) as exc:
                logger.warning("Variant %s seed %d failed: %s", variant.value, seed, exc)
                row.failures[seed] = f"{type(exc).__name__}: {exc}"
                continue
            row.maps[seed] = report.mean_ap
            logger.info("Variant %s seed %d: mAP %.4f", variant.value, seed, report.mean_ap)
        rows.append(row)

    table = AblationTable(rows=rows, seeds=seeds)
    write_ablation_csv(table, out_dir / "ablation.csv")
    write_ablation_text(table, out_dir / "ablation.txt")
    return table


def write_ablation_csv(table: AblationTable, path: Path) -> Path:
    header = ["variant", "description"] + [f"seed{s}" for s in table.seeds] + ["mean", "min", "max", "failure"]
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(header)
            for row in table.rows:
                writer.writerow(
                    [row.variant.value, VARIANT_DESCRIPTIONS[row.variant]]
                    + [_fmt(row.maps.get(s)) for s in table.seeds]
                    + [_fmt(row.mean), _fmt(row.minimum), _fmt(row.maximum), row.failure]
                )
    except OSError as exc:
        raise StorageError(f"cannot write ablation table ({exc})", str(path)) from exc
    return path


def format_ablation_table(table: AblationTable) -> str:
    """Fixed-width table with mean mAP and min/max spread per variant."""
    lines = [f"{'Variant':<8}{'Setting':<60}{'mAP mean':>10}  {'[min, max]':<18}"]
    lines.append("-" * len(lines[0]))
    for row in table.rows:
        spread = f"[{_fmt(row.minimum)}, {_fmt(row.maximum)}]" if row.maps else "-"
        mean = _fmt(row.mean) or "FAILED"
        line = f"{row.variant.value:<8}{VARIANT_DESCRIPTIONS[row.variant]:<60}{mean:>10}  {spread:<18}"
        if row.failures:
            line += f"  ({len(row.failures)} failed)"
        lines.append(line.rstrip())
    return "\n".join(lines) + "\n"


def write_ablation_text(table: AblationTable, path: Path) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(format_ablation_table(table), encoding="utf-8")
    except OSError as exc:
        raise StorageError(f"cannot write ablation table ({exc})", str(path)) from exc
    return path
