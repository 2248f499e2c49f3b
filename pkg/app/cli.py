"""Command-line entry point.

    generate-data  build a synthetic dataset directory
    train          run the training pipeline, write a checkpoint and the run log
    map            compute probability maps of every slide with a checkpoint
    eval           slide ROC AUC, lesion FROC and pixel overlap
    tune-beta      β₁ for a target θ₀ and the optimal θ₀ over β₁
    inspect        SVG overlay of a slide's probability map

Errors are reported as one JSON line on stderr. Configuration and usage
errors exit with status 2, everything else with status 1.
"""
import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.exceptions import ConfigError, RootNotBracketedError, SegmentationError
from app.core.noise_model import (
    bernoulli_loss_grid,
    closed_form_kl_theta0,
    expected_loss_surface,
    optimal_theta0,
    tune_beta1,
)
from app.data import storage
from app.data.synthwsi import dataset_summary, generate_dataset
from app.metrics.classification import roc_auc, roc_points, score_slides
from app.metrics.detection import detections_from_map, evaluate_maps, froc
from app.metrics.plots import plot_froc, plot_loss_surfaces, plot_overlay, plot_roc
from app.models import checkpoint
from app.schemas.config import BetaParams, ExperimentConfig, NoiseSetting, load_config, parse_config, write_resolved_config
from app.services.map_store import MapStore, run_mapping_pass
from app.services.pipeline import run_training

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "weights.nwt"
USAGE_EXIT = 2
FAILURE_EXIT = 1


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message, code="usage_error")


def _emit_error(error: SegmentationError) -> None:
    print(json.dumps(error.to_dict()), file=sys.stderr)


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _load_experiment(args, required: bool = True) -> ExperimentConfig:
    if args.config:
        config = load_config(args.config)
    elif required:
        raise ConfigError(f"{args.command} requires --config", code="usage_error")
    else:
        config = ExperimentConfig()

    data = config.model_dump()
    if args.seed is not None:
        data["dataset"]["seed"] = args.seed
        data["network"]["seed"] = args.seed
        data["pipeline"]["seed"] = args.seed
    if getattr(args, "deterministic", False):
        data["pipeline"]["deterministic"] = True
    if args.out:
        if args.command == "generate-data":
            data["data_dir"] = args.out
        elif args.command == "map":
            data["maps_dir"] = args.out
        elif args.command != "inspect":
            data["output_dir"] = args.out
    return parse_config(data)


def _checkpoint_path(args, config: ExperimentConfig) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(config.output_dir) / CHECKPOINT_NAME


def _write_rows(path: Path, fieldnames: List[str], rows: Sequence[dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return path


def cmd_generate_data(args) -> int:
    config = _load_experiment(args)
    slides = generate_dataset(config.dataset)
    directory = storage.save_dataset(slides, config.dataset, config.data_dir)
    write_resolved_config(config, directory)
    rows = dataset_summary(slides, config.pipeline.patch_size)
    _write_rows(directory / "summary.csv", list(rows[0]), rows)
    _print({
        "data_dir": str(directory),
        "benign": sum(r["label"] == "benign" for r in rows),
        "malign": sum(r["label"] == "malign" for r in rows),
        "slides": rows,
    })
    return 0


def cmd_train(args) -> int:
    config = _load_experiment(args)
    _, slides = storage.load_dataset(config.data_dir)
    result = run_training(slides, config.network, config.pipeline)

    output = Path(config.output_dir)
    write_resolved_config(config, output)
    checkpoint.save(result.weights, output / CHECKPOINT_NAME)
    result.run_log.write_csv(output / "run_log.csv")
    result.run_log.write_visits_csv(output / "visits.csv")
    maps_dir = config.resolved_maps_dir
    for slide_id, entry in result.store.snapshot().items():
        storage.save_prob_map(maps_dir, slide_id, entry.prob_map, entry.weights_version, entry.map_version)

    log = result.run_log
    _print({
        "checkpoint": str(output / CHECKPOINT_NAME),
        "steps": len(log.steps),
        "final_loss": log.steps[-1].loss if log.steps else None,
        "tail_gamma": log.tail_gamma(),
        "max_staleness": log.max_staleness,
        "staleness_bound": log.staleness_bound,
        "max_visit_gap": log.max_visit_gap,
        "torn_reads": log.torn_reads,
    })
    return 0


def _mapping_store(config: ExperimentConfig, args, slides) -> MapStore:
    weights = checkpoint.load(_checkpoint_path(args, config))
    return run_mapping_pass(weights, slides, config.pipeline.map_chunk_size)


def cmd_map(args) -> int:
    config = _load_experiment(args)
    _, slides = storage.load_dataset(config.data_dir)
    store = _mapping_store(config, args, slides)
    maps_dir = Path(config.resolved_maps_dir)
    for slide_id, entry in store.snapshot().items():
        storage.save_prob_map(maps_dir, slide_id, entry.prob_map, entry.weights_version, entry.map_version)
    write_resolved_config(config, maps_dir)
    _print({"maps_dir": str(maps_dir), "slides": len(store), "weights_version": store.latest_weights_version})
    return 0


def cmd_eval(args) -> int:
    config = _load_experiment(args)
    _, slides = storage.load_dataset(config.data_dir)
    if args.checkpoint:
        maps = {k: e.prob_map for k, e in _mapping_store(config, args, slides).snapshot().items()}
    else:
        maps = storage.load_prob_maps(config.resolved_maps_dir)
    missing = [s.slide_id for s in slides if s.slide_id not in maps]
    if missing:
        raise ConfigError(f"no probability map for {len(missing)} slides, e.g. {missing[0]}", code="missing_file")

    labels = {s.slide_id: s.label for s in slides}
    maps = {slide_id: maps[slide_id] for slide_id in labels}
    masks = {s.slide_id: s.truth_mask for s in slides}
    threshold = config.detection_threshold
    output = Path(config.output_dir)
    write_resolved_config(config, output)

    scores = score_slides(maps, labels)
    auc = roc_auc(scores)
    points = roc_points(scores)
    detections = {slide_id: detections_from_map(q, threshold) for slide_id, q in maps.items()}
    froc_result = froc(detections, masks)
    overlap = evaluate_maps({k: v for k, v in maps.items() if labels[k] == 1}, masks, threshold)
    mean_dice = float(np.mean([d for d, _ in overlap.values()])) if overlap else None
    mean_iou = float(np.mean([i for _, i in overlap.values()])) if overlap else None

    metrics = {"roc_auc": auc, "froc_average": froc_result.average, "mean_dice": mean_dice, "mean_iou": mean_iou}
    for rate, sensitivity in zip(froc_result.fp_rates, froc_result.sensitivities):
        metrics[f"sensitivity_at_{rate:g}_fp"] = sensitivity
    _write_rows(output / "metrics.csv", ["metric", "value"], [{"metric": k, "value": v} for k, v in metrics.items()])
    _write_rows(output / "slide_scores.csv", ["slide_id", "score", "label"], [s.model_dump() for s in scores])
    _write_rows(output / "roc.csv", ["fpr", "tpr"], [{"fpr": x, "tpr": y} for x, y in points])
    _write_rows(output / "froc.csv", ["fp_per_slide", "sensitivity"],
                [{"fp_per_slide": x, "sensitivity": y} for x, y in froc_result.curve])
    plot_roc(points, auc, output / "roc.svg")
    plot_froc(froc_result, output / "froc.svg")
    _print(metrics)
    return 0


def cmd_tune_beta(args) -> int:
    noise = parse_config({"gamma": args.gamma, "r": args.r}, NoiseSetting)
    beta1 = tune_beta1(args.theta0, args.beta0, noise)
    table = []
    for b1 in sorted(set(np.round(np.linspace(0.0, 1.0, 11), 10).tolist() + [round(beta1, 4)])):
        if not 0.0 <= b1 <= 1.0:
            continue
        try:
            theta0 = optimal_theta0(noise, BetaParams(beta0=args.beta0, beta1=b1))
        except RootNotBracketedError:
            theta0 = None
        table.append({"beta1": b1, "optimal_theta0": theta0})

    if args.plot:
        grid = np.linspace(0.01, 0.99, 99)
        surface = expected_loss_surface(noise, args.beta0, grid, np.linspace(0.0, 1.0, 51))
        bernoulli = bernoulli_loss_grid(BetaParams(beta0=args.beta0, beta1=min(max(beta1, 0.0), 1.0)), grid)
        plot_loss_surfaces(surface, grid, bernoulli, args.plot)

    _print({
        "beta1": beta1,
        "kl_optimal_theta0": closed_form_kl_theta0(noise),
        "table": table,
    })
    return 0


def cmd_inspect(args) -> int:
    config = _load_experiment(args, required=False)
    _, slides = storage.load_dataset(args.data or config.data_dir)
    by_id = {s.slide_id: s for s in slides}
    if args.slide not in by_id:
        raise ConfigError(f"unknown slide {args.slide}", code="missing_file")
    slide = by_id[args.slide]
    if args.checkpoint:
        weights = checkpoint.load(args.checkpoint)
        prob_map = run_mapping_pass(weights, [slide], config.pipeline.map_chunk_size).read(slide.slide_id).prob_map
    else:
        prob_map = storage.load_prob_map(args.maps or config.resolved_maps_dir, slide.slide_id)
    target = Path(args.out) if args.out else Path(config.output_dir) / f"{slide.slide_id}_overlay.svg"
    plot_overlay(slide.pixels, prob_map, slide.truth_mask, target, title=slide.slide_id)
    _print({"slide_id": slide.slide_id, "overlay": str(target), "max_probability": float(np.max(prob_map))})
    return 0


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment configuration")
    common.add_argument("--seed", type=int, help="Override every seed of the configuration")
    common.add_argument("--out", help="Output location of the command")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = ArgumentParser(description="Weakly supervised segmentation with β-divergence training and dynamic patch sampling.")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("generate-data", parents=[common], help="Generate a synthetic slide dataset")

    train = sub.add_parser("train", parents=[common], help="Train the segmentation network")
    train.add_argument("--deterministic", action="store_true", help="Single-threaded interleaved schedule")

    for name, text in (("map", "Compute probability maps"), ("eval", "Evaluate probability maps")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help=f"Weight checkpoint (default <output_dir>/{CHECKPOINT_NAME})")

    tune = sub.add_parser("tune-beta", parents=[common], help="Tune β₁ for a target θ₀")
    tune.add_argument("--gamma", type=float, required=True, help="Label-noise rate γ")
    tune.add_argument("--r", type=float, required=True, help="Benign slide ratio r")
    tune.add_argument("--beta0", type=float, required=True, help="Benign class exponent β₀")
    tune.add_argument("--theta0", type=float, required=True, help="Target θ₀")
    tune.add_argument("--plot", help="Write the loss surfaces to this SVG file")

    inspect = sub.add_parser("inspect", parents=[common], help="Render a probability overlay")
    inspect.add_argument("--slide", required=True, help="Slide id")
    inspect.add_argument("--data", help="Dataset directory (default data_dir of the configuration)")
    inspect.add_argument("--maps", help="Map directory (default maps_dir of the configuration)")
    inspect.add_argument("--checkpoint", help="Map the slide with this checkpoint instead of reading a map")
    return parser


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "map": cmd_map,
    "eval": cmd_eval,
    "tune-beta": cmd_tune_beta,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
        return COMMANDS[args.command](args)
    except ConfigError as e:
        _emit_error(e)
        return USAGE_EXIT
    except SegmentationError as e:
        _emit_error(e)
        return FAILURE_EXIT
    except Exception as e:
        logger.error(f"Unexpected failure: {str(e)}")
        _emit_error(SegmentationError(str(e), code="internal_error"))
        return FAILURE_EXIT
