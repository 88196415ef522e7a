"""
Command-line interface.

    python -m src.cli gen-data   [--out DIR] [--workers N]
    python -m src.cli train      [--data DIR] [--run-dir DIR]
    python -m src.cli eval       --checkpoint PATH [--split test] [--out DIR]
    python -m src.cli detect     --checkpoint PATH IMAGE [--overlay OUT.png]
    python -m src.cli ablate     [--data DIR] [--out DIR]
    python -m src.cli plot-pr    CSV [CSV ...] --out OUT.svg
    python -m src.cli verify-data [--data DIR]

Every subcommand accepts ``--config FILE`` and ``--section.key=value``
overrides. Exit codes: 0 success, 2 validation, 3 divergence, 4 IO,
5 empty evaluation split.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src.config import (
    configure_logging,
    load_experiment_config,
    parse_override_args,
    resolve_data_root,
    settings,
    split_known_overrides,
)
from src.exceptions import EXIT_SUCCESS, EXIT_VALIDATION, EmptySplitError, T2Error
from src.schemas.config_schemas import ExperimentConfig
from src.schemas.detection_schemas import DetectionResponse
from src.schemas.synth_schemas import CLASS_NAMES

logger = logging.getLogger("src.cli")


def _data_root(args: argparse.Namespace, config: ExperimentConfig) -> Path:
    return Path(args.data) if getattr(args, "data", None) else resolve_data_root(config)


def cmd_gen_data(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.synthlight_service import build_corpus

    out = Path(args.out) if args.out else resolve_data_root(config)
    manifest = build_corpus(config.synth, out, workers=args.workers)
    sizes = {name: len(ids) for name, ids in manifest["splits"].items()}
    print(json.dumps({"root": str(out), "splits": sizes}, sort_keys=True))
    return EXIT_SUCCESS


def cmd_verify_data(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.synthlight_service import verify_corpus

    mismatched = verify_corpus(_data_root(args, config))
    for name in mismatched:
        print(name)
    if mismatched:
        logger.error("%d corpus files do not match the manifest", len(mismatched))
        return EXIT_VALIDATION
    return EXIT_SUCCESS


def cmd_train(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.training_service import train

    result = train(config, _data_root(args, config), run_dir=args.run_dir)
    print(json.dumps({"checkpoint": str(result.checkpoint_path), "final_loss": result.final_loss}, sort_keys=True))
    return EXIT_SUCCESS


def cmd_eval(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.report_service import evaluate

    report = evaluate(args.checkpoint, _data_root(args, config), split=args.split, out_dir=args.out, config=config)
    sys.stdout.write(report.to_json())
    if report.empty:
        raise EmptySplitError(f"split '{args.split}' holds no images")
    return EXIT_SUCCESS


def cmd_detect(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.checkpoint_service import load_checkpoint
    from src.services.detection_service import detect, draw_overlay

    checkpoint = load_checkpoint(args.checkpoint)
    model = checkpoint.build()
    dets = detect(model, args.image, config.eval, score_threshold=args.score_threshold)
    payload = [DetectionResponse.from_detection(d, CLASS_NAMES).model_dump() for d in dets]
    print(json.dumps(payload, indent=2))
    if args.overlay:
        draw_overlay(args.image, dets, args.overlay, CLASS_NAMES)
        logger.info("Overlay written to %s", args.overlay)
    return EXIT_SUCCESS


def cmd_ablate(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.ablation_service import format_ablation_table, run_ablation

    out = Path(args.out) if args.out else Path(settings.T2_RUNS_DIR) / "ablation"
    table = run_ablation(config, _data_root(args, config), out)
    sys.stdout.write(format_ablation_table(table))
    return EXIT_SUCCESS


def cmd_plot_pr(args: argparse.Namespace, config: ExperimentConfig) -> int:
    from src.services.evaluation_service import plot_pr_curves, read_pr_csv

    curves = {}
    for spec in args.csv:
        label, _, path = spec.rpartition("=")
        curves[label or Path(path).stem] = read_pr_csv(Path(path))
    plot_pr_curves(curves, Path(args.out), title=args.title)
    logger.info("PR plot written to %s", args.out)
    return EXIT_SUCCESS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (section.key = value lines)")
    common.add_argument("--log-level", default=None, help="logging level (default from LOG_LEVEL)")

    parser = argparse.ArgumentParser(
        prog="t2",
        description="Low-light object detection with illumination/reflectance decomposition.",
        epilog="Any --section.key=value flag overrides the config file.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="build the synthetic low-light corpus")
    p.add_argument("--out", help="output directory (default: data.root or T2_DATA_DIR)")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("verify-data", parents=[common], help="re-hash corpus files against the manifest")
    p.add_argument("--data")
    p.set_defaults(handler=cmd_verify_data)

    p = sub.add_parser("train", parents=[common], help="train one variant")
    p.add_argument("--data")
    p.add_argument("--run-dir", help="default: runs/<variant>-seed<seed>")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="report directory (default: next to the checkpoint)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("detect", parents=[common], help="detect objects in one image")
    p.add_argument("image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--overlay", help="write the image with drawn boxes here")
    p.add_argument("--score-threshold", type=float, default=0.3)
    p.set_defaults(handler=cmd_detect)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate all variants over several seeds")
    p.add_argument("--data")
    p.add_argument("--out", help="default: T2_RUNS_DIR/ablation")
    p.set_defaults(handler=cmd_ablate)

    p = sub.add_parser("plot-pr", parents=[common], help="render PR-curve CSVs to an SVG")
    p.add_argument("csv", nargs="+", help="CSV path, optionally prefixed with 'label='")
    p.add_argument("--out", required=True)
    p.add_argument("--title")
    p.set_defaults(handler=cmd_plot_pr)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    known, override_tokens = split_known_overrides(argv)
    args = build_parser().parse_args(known)
    configure_logging(args.log_level)
    try:
        overrides = parse_override_args(override_tokens)
        config = load_experiment_config(args.config, overrides)
        return args.handler(args, config)
    except T2Error as exc:
        logger.error("%s", exc)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
