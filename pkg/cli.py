#!/usr/bin/env python3
"""
Affect Trace command line.

Subcommands:
    simulate  write a synthetic dataset (traces, manifest, annotations)
    train     fit the temporal regressor on a dataset's train split
    infer     run the streaming pipeline over traces, one prediction CSV per clip
    eval      score predictions against dataset labels
    bench     compare predicted descriptor traces with reference traces

Exit codes: 0 ok, 2 bad arguments or configuration, 3 I/O or parse failure,
4 training diverged, 5 checkpoint mismatch, 6 predictions misaligned with labels,
7 data too small or degenerate to score.
Every output directory receives the resolved ``run_config.yaml``.
"""
from typing import Any, Callable, Dict, List, Optional, Sequence
import argparse
import glob
import logging
import os
import sys

import yaml
from pydantic import ValidationError as PydanticValidationError

from evaluation import Misalignment, build_frame_table, evaluate, feature_benchmark
from input_validator import ValidationError, validator
from metrics import MetricError
from performance_optimizer import ClipBatchProcessor, performance_monitor
from pipeline import AffectPipeline, PipelineError
from regressor import CheckpointError, EmptyTrainSet, NonFiniteLoss, check_compatible, init_model, load_checkpoint, save_checkpoint
from report_writer import write_bench_report, write_eval_report
from settings import FilterMode, RunConfig, dump_run_config, load_run_config
from simulator import simulate_dataset
from trace_io import (
    ManifestError,
    ParseError,
    Split,
    load_manifest,
    parse_annotations,
    read_predictions,
    read_trace,
    resolve_trace_path,
    save_predictions,
)
from trainer import load_training_clips, train, write_loss_history

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CHECKPOINT = 5
EXIT_MISALIGNED = 6
EXIT_METRIC = 7

CONFIG_SUFFIXES = (".yaml", ".yml")

MANIFEST_FILENAME = "manifest.yaml"
ANNOTATIONS_FILENAME = "annotations.csv"
CHECKPOINT_FILENAME = "model.ckpt"
HISTORY_FILENAME = "loss_history.csv"
PREDICTIONS_DIRNAME = "predictions"


class UsageError(Exception):
    """Arguments are inconsistent."""
    pass


# ============================================================================
# ARGUMENTS
# ============================================================================

def _leave_n(text: str) -> List[int]:
    try:
        return validator.validate_percentages(validator.parse_int_list(text))
    except ValidationError as e:
        raise argparse.ArgumentTypeError(str(e))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="affect-trace", description=__doc__.split("\n\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML file with run configuration sections")
    common.add_argument("--out", required=True, help="Output directory")
    common.add_argument("--seed", type=int, help="Seed for the command's random generators")
    common.add_argument("--verbose", action="store_true", help="Log at DEBUG level")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="Write a synthetic dataset")
    p.add_argument("--clips", type=int, help="Number of clips")

    p = sub.add_parser("train", parents=[common], help="Train the regressor")
    p.add_argument("--data", required=True, help="Dataset directory holding manifest.yaml")
    p.add_argument("--epochs", type=int, help="Training epochs")
    p.add_argument("--window", type=int, help="Pipeline window length stored with the checkpoint")

    p = sub.add_parser("infer", parents=[common], help="Predict VA for every trace")
    p.add_argument("--checkpoint", required=True, help="Checkpoint written by 'train'")
    p.add_argument("--traces", required=True, help="Dataset directory or directory of .jsonl traces")
    p.add_argument("--split", choices=[s.value for s in Split], help="Only clips of this split (dataset input)")
    p.add_argument("--window", type=int, help="Window length N")

    p = sub.add_parser("eval", parents=[common], help="Evaluate predictions")
    p.add_argument("--data", required=True, help="Dataset directory holding manifest.yaml")
    p.add_argument("--predictions", required=True, help="Directory of prediction CSVs")
    p.add_argument("--grid-res", type=int, help="Grid resolution R")
    p.add_argument("--leave-n", type=_leave_n, help="Comma-separated percentages, e.g. 25,50,75,100")
    p.add_argument("--filter", choices=[m.value for m in FilterMode], help="Only this leave-N-in filter")
    p.add_argument("--split", choices=[s.value for s in Split], help="Split to evaluate")

    p = sub.add_parser("bench", parents=[common], help="Landmark/AU benchmark of predicted traces")
    p.add_argument("--predicted", required=True, help="Directory of predicted .jsonl traces")
    p.add_argument("--reference", required=True, help="Directory of reference .jsonl traces")
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides: Dict[str, Any] = {
        "sim": {"n_clips": get("clips")},
        "pipeline": {"window_len": get("window")},
        "train": {"epochs": get("epochs")},
        "eval": {
            "grid_res": get("grid_res"),
            "leave_n": get("leave_n"),
            "filters": [get("filter")] if get("filter") else None,
            "split": get("split") if args.command == "eval" else None,
        },
    }
    if args.seed is not None:
        if args.command == "simulate":
            overrides["sim"]["seed"] = args.seed
        elif args.command == "train":
            overrides["train"]["seed"] = args.seed
            overrides["model"] = {"seed": args.seed}
    return overrides


def _config_has_section(path: Optional[str], section: str) -> bool:
    if not path:
        return False
    with open(path, "r", encoding="utf-8") as fh:
        loaded = yaml.safe_load(fh) or {}
    return isinstance(loaded, dict) and section in loaded


def _out_dir(args: argparse.Namespace) -> str:
    try:
        return validator.validate_output_dir(args.out)
    except ValidationError as e:
        raise UsageError(str(e))


def _trace_files(directory: str) -> List[str]:
    return sorted(glob.glob(os.path.join(directory, "*.jsonl")))


# ============================================================================
# COMMANDS
# ============================================================================

def cmd_simulate(args: argparse.Namespace, config: RunConfig) -> int:
    out = _out_dir(args)
    _, summary = simulate_dataset(config.sim, out, threads=config.threads)
    dump_run_config(config, out)
    for line in summary.lines():
        print(line)
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    out = _out_dir(args)
    manifest_path = os.path.join(args.data, MANIFEST_FILENAME)
    clips = load_training_clips(manifest_path, Split.TRAIN, threads=config.threads)
    model = init_model(config.model)
    model, history = train(model, clips, config.train)
    save_checkpoint(model, os.path.join(out, CHECKPOINT_FILENAME), config.pipeline)
    write_loss_history(history, os.path.join(out, HISTORY_FILENAME))
    dump_run_config(config, out)
    if history:
        print(f"epochs: {len(history)}  first loss: {history[0]:.6f}  final loss: {history[-1]:.6f}")
    return EXIT_OK


def _infer_inputs(args: argparse.Namespace) -> List[str]:
    manifest_path = os.path.join(args.traces, MANIFEST_FILENAME)
    if os.path.isfile(manifest_path):
        manifest = load_manifest(manifest_path)
        clips = manifest.in_split(args.split) if args.split else manifest.clips
        return [resolve_trace_path(manifest_path, c) for c in clips]
    if args.split:
        raise UsageError("--split needs a dataset directory with manifest.yaml")
    if not os.path.isdir(args.traces):
        raise FileNotFoundError(f"Trace directory not found: {args.traces}")
    return _trace_files(args.traces)


def cmd_infer(args: argparse.Namespace, config: RunConfig) -> int:
    out = _out_dir(args)
    model, stored_pipeline = load_checkpoint(validator.validate_existing_file(args.checkpoint))
    if _config_has_section(args.config, "model"):
        check_compatible(model, config.model)
    # a pipeline section replaces the stored settings; --window alone only resizes them
    if _config_has_section(args.config, "pipeline"):
        pipeline_cfg = config.pipeline
    elif args.window is not None:
        pipeline_cfg = stored_pipeline.model_copy(update={"window_len": args.window})
    else:
        pipeline_cfg = stored_pipeline
    pipeline = AffectPipeline(model, pipeline_cfg)
    pred_dir = os.path.join(out, PREDICTIONS_DIRNAME)
    os.makedirs(pred_dir, exist_ok=True)

    def run(path: str) -> int:
        trace = read_trace(path)
        predictions = pipeline.process_trace(trace)
        save_predictions(predictions, os.path.join(pred_dir, f"{trace.clip_id}.csv"))
        return len(predictions)

    paths = _infer_inputs(args)
    counts = ClipBatchProcessor(config.threads).map(run, paths)
    dump_run_config(config.model_copy(update={"model": model.config, "pipeline": pipeline_cfg}), out)
    fps = performance_monitor.throughput("infer_frames")
    print(f"clips: {len(counts)}  frames: {sum(counts)}  throughput: {fps:.0f} frames/s")
    return EXIT_OK


def _load_predictions(directory: str, manifest, split: Split) -> Dict[str, Any]:
    """Prediction traces of ``split``; files of other known clips are skipped."""
    known = manifest.by_id()
    wanted = {c.clip_id for c in manifest.in_split(split)}
    predictions = {}
    for path in sorted(glob.glob(os.path.join(directory, "*.csv"))):
        clip_id = os.path.splitext(os.path.basename(path))[0]
        if clip_id in known and clip_id not in wanted:
            continue
        predictions[clip_id] = read_predictions(path)
    return predictions


def cmd_eval(args: argparse.Namespace, config: RunConfig) -> int:
    out = _out_dir(args)
    manifest_path = os.path.join(args.data, MANIFEST_FILENAME)
    manifest = load_manifest(manifest_path)
    split = Split(config.eval.split)
    if not os.path.isdir(args.predictions):
        raise FileNotFoundError(f"Prediction directory not found: {args.predictions}")
    predictions = _load_predictions(args.predictions, manifest, split)

    for clip in manifest.in_split(split):
        if clip.clip_id in predictions:
            n_frames = len(read_trace(resolve_trace_path(manifest_path, clip)))
            if n_frames != len(predictions[clip.clip_id]):
                raise Misalignment(
                    f"'{clip.clip_id}' has {n_frames} frames but {len(predictions[clip.clip_id])} predictions"
                )

    table = build_frame_table(predictions, manifest, split)
    annotations = None
    annotations_path = os.path.join(args.data, ANNOTATIONS_FILENAME)
    if os.path.isfile(annotations_path):
        with open(annotations_path, "rb") as fh:
            in_split = {c.clip_id for c in manifest.in_split(split)}
            annotations = [a for a in parse_annotations(fh.read()) if a.clip_id in in_split]

    report = evaluate(table, config.eval, annotations)
    write_eval_report(report.to_dict(), out)
    dump_run_config(config, out)
    overall = report.overall
    print(f"frames: {overall['n_frames']}  CCC v/a: {overall['ccc_v']:.3f}/{overall['ccc_a']:.3f}  "
          f"MAE v/a: {overall['mae_v']:.3f}/{overall['mae_a']:.3f}")
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, config: RunConfig) -> int:
    out = _out_dir(args)
    pairs = []
    for ref_path in _trace_files(args.reference):
        pred_path = os.path.join(args.predicted, os.path.basename(ref_path))
        if not os.path.isfile(pred_path):
            raise Misalignment(f"No predicted trace for {os.path.basename(ref_path)}")
        pairs.append((read_trace(pred_path), read_trace(ref_path)))
    report = feature_benchmark(pairs, config.eval.ced_threshold, config.eval.ced_steps)
    write_bench_report(report, out)
    dump_run_config(config, out)
    landmarks = report["landmarks"]
    print(f"images: {landmarks['n_images']}  CED-AUC: {landmarks['ced_auc']:.2f}")
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
}


# ============================================================================
# ENTRY POINT
# ============================================================================

def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)

    try:
        if args.config:
            validator.validate_existing_file(args.config, CONFIG_SUFFIXES)
        config = load_run_config(args.config, _overrides(args))
    except (PydanticValidationError, ValidationError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_USAGE
    except (OSError, yaml.YAMLError) as e:
        logger.error(f"Cannot read configuration: {e}")
        return EXIT_IO

    try:
        return COMMANDS[args.command](args, config)
    except UsageError as e:
        logger.error(str(e))
        return EXIT_USAGE
    except NonFiniteLoss as e:
        logger.error(f"Training diverged: {e}")
        return EXIT_DIVERGED
    except CheckpointError as e:
        logger.error(f"Checkpoint error: {e}")
        return EXIT_CHECKPOINT
    except Misalignment as e:
        logger.error(f"Misaligned inputs: {e}")
        return EXIT_MISALIGNED
    except MetricError as e:
        logger.error(f"Cannot score: {type(e).__name__}: {e}")
        return EXIT_METRIC
    except (ParseError, ManifestError, ValidationError, PipelineError, EmptyTrainSet, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_IO
    finally:
        report = performance_monitor.get_performance_report()
        logger.debug(f"Operation stats: {report['operation_stats']}")
        for recommendation in report["recommendations"]:
            logger.info(recommendation)


if __name__ == "__main__":
    sys.exit(main())
