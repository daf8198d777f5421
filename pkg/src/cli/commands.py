"""
Subcommands gen-data | train | explain | evaluate | meta | report
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional

from src.core import (
    AttributionArchive,
    EvaluationEngine,
    ReportBuilder,
    ResultsStore,
    model_zoo,
    scene_synth,
)
from src.core.engine import select_samples
from src.core.errors import (
    AttrExError,
    ChecksumMismatchError,
    ConfigError,
    CorruptManifestError,
    ModelFileError,
    PreconditionError,
)
from src.core.meta_eval import run_meta_evaluation
from src.core.metrics import IROF_ABLATION, resolve_metric
from src.core.report_builder import CHART_NAME, format_score, render_mc_chart
from src.core.run_config import PROFILES, RunConfig, build_run_config

from .console import print_table, setup_logging

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_COMPUTATION = 4

MODEL_FILE = "model.bin"
TRAIN_LOG = "train_log.json"
RESULTS_FILE = "results.csv"
RESULTS_SUMMARY = "results_summary.json"
META_FILE = "meta.json"

logger = logging.getLogger(__name__)


def _id_list(text: str) -> List[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def _common_flags() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed")
    common.add_argument("--workers", type=int, default=None, help="worker pool size")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--config", type=Path, default=None, help="JSON file overriding flags")
    common.add_argument("--profile", choices=sorted(PROFILES), default="desk", help="scale profile")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="attrex", description="Attribution explanations, explanation "
                                                                "metrics and metric meta-evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", parents=[common], help="generate a synthetic scene dataset")
    gen.add_argument("--n", type=int, help="number of scenes (default: profile dataset_size)")
    gen.add_argument("--height", type=int)
    gen.add_argument("--width", type=int)
    gen.add_argument("--num-classes", type=int)
    gen.add_argument("--region-shape", choices=scene_synth.REGION_SHAPES)
    gen.add_argument("--noise-std", type=float)
    gen.add_argument("--single-class-fraction", type=float)
    gen.add_argument("--no-masks", action="store_true", help="omit segmentation masks")

    train = sub.add_parser("train", parents=[common], help="train the TinyCNN classifier")
    train.add_argument("--data", required=True)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)
    train.add_argument("--holdout", type=float)

    for name, help_text in (("explain", "compute and archive attribution maps"),
                            ("evaluate", "score attribution maps with explanation metrics"),
                            ("meta", "meta-evaluate explanation metrics")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--methods", type=_id_list)
        p.add_argument("--n", type=int, help="number of samples")
        if name != "explain":
            p.add_argument("--metrics", type=_id_list)
        if name == "evaluate":
            p.add_argument("--attributions", help="archive written by explain")
            p.add_argument("--require-masks", action="store_true")
        if name == "meta":
            p.add_argument("--k", type=int, help="perturbation plans per mode")
            p.add_argument("--iterations", type=int)
            p.add_argument("--spaces", type=_id_list)
            p.add_argument("--irof-ablation", action="store_true", help="add the six IROF variants")

    report = sub.add_parser("report", parents=[common], help="consolidated markdown report")
    report.add_argument("--results", type=Path, help="results.csv from evaluate")
    report.add_argument("--meta", type=Path, help="meta.json from meta")
    return parser


def _drop_none(values: Dict[str, Any]) -> Dict[str, Any]:
    out = {}
    for key, value in values.items():
        if isinstance(value, dict):
            value = _drop_none(value)
            if value:
                out[key] = value
        elif value is not None:
            out[key] = value
    return out


def _flag_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    def get(name: str):
        return getattr(args, name, None)

    n = get("n")
    spaces = get("spaces")
    return _drop_none({
        "workers": args.workers,
        "out": args.out,
        "dataset": get("data"),
        "model": get("model"),
        "attributions": get("attributions"),
        "methods": get("methods"),
        "metrics": get("metrics"),
        "dataset_size": n if args.command == "gen-data" else None,
        "eval_samples": n if args.command in ("explain", "evaluate") else None,
        "scene": {
            "height": get("height"),
            "width": get("width"),
            "num_classes": get("num_classes"),
            "region_shape": get("region_shape"),
            "noise_std": get("noise_std"),
            "single_class_fraction": get("single_class_fraction"),
        },
        "train": {
            "epochs": get("epochs"),
            "lr": get("lr"),
            "batch_size": get("batch_size"),
            "holdout_fraction": get("holdout"),
        },
        "meta": {
            "n_samples": n if args.command == "meta" else None,
            "k_plans": get("k"),
            "iterations": get("iterations"),
            "spaces": tuple(spaces) if spaces else None,
        },
    })


def _write_json(path: Path, document: Dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(document, indent=2, sort_keys=True, default=str))


def _load_inputs(config: RunConfig):
    dataset = scene_synth.load_dataset(Path(config.dataset))
    try:
        model = model_zoo.load_model(Path(config.model))
    except FileNotFoundError:
        raise PreconditionError(f"model file {config.model} not found")
    return dataset, model


def cmd_gen_data(args: argparse.Namespace, config: RunConfig) -> int:
    scene_config = config.scene_config()
    dataset = scene_synth.generate_dataset(scene_config, config.dataset_size, base_seed=0)
    scene_synth.save_dataset(dataset, Path(config.out), with_masks=not args.no_masks)
    summary = scene_synth.dataset_summary(dataset.scenes)
    print_table("Dataset", ["scenes", "single-class", "with masks"],
                [[str(summary["count"]), str(summary["single_class"]), str(not args.no_masks)]])
    print_table("Class frequency", ["class", "frequency"],
                [[str(c), format_score(f)] for c, f in enumerate(summary["class_frequency"])])
    return EXIT_OK


def cmd_train(args: argparse.Namespace, config: RunConfig) -> int:
    dataset = scene_synth.load_dataset(Path(config.dataset))
    images, labels = dataset.images(), dataset.labels()
    train_idx, holdout_idx = model_zoo.split_holdout(len(dataset), config.train.holdout_fraction, config.seed)
    scene_cfg = dataset.config
    model = model_zoo.build_tiny_cnn((scene_cfg.channels, scene_cfg.height, scene_cfg.width),
                                     scene_cfg.num_classes, config.seed)
    model, history = model_zoo.train(model, images[train_idx], labels[train_idx], config.train)

    eval_idx = holdout_idx if holdout_idx.size else train_idx
    scores = model_zoo.evaluate_predictions(model, images[eval_idx], labels[eval_idx])
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    model_zoo.save_model(model, out / MODEL_FILE)
    _write_json(out / TRAIN_LOG, {
        "config": config.to_dict(),
        "loss_history": history,
        "evaluation": scores,
        "train_samples": int(train_idx.size),
        "holdout_samples": int(holdout_idx.size),
        "model_sha256": scene_synth.file_sha256(out / MODEL_FILE),
    })
    print_table("Training", ["epochs", "final loss", "macro-F1", "subset accuracy"],
                [[str(config.train.epochs), format_score(history[-1] if history else float("nan"), 5),
                  format_score(scores["macro_f1"]), format_score(scores["subset_accuracy"])]])
    print_table("Per-class F1", ["class", "F1"],
                [[str(c), format_score(f)] for c, f in enumerate(scores["per_class_f1"])])
    return EXIT_OK


def cmd_explain(args: argparse.Namespace, config: RunConfig) -> int:
    dataset, model = _load_inputs(config)
    scenes = select_samples(dataset.scenes, config.eval_samples, config.seed, "evaluate")
    engine = EvaluationEngine(config.workers)
    maps = engine.explain_all(model, scenes, config.methods, config.method_config, config.seed)
    AttributionArchive(Path(config.out)).write(maps, config.to_dict())
    print_table("Attribution maps", ["method", "maps"],
                [[m, str(sum(1 for key in maps if key[2] == m))] for m in config.methods])
    return EXIT_OK


def _check_masks(config: RunConfig, has_masks: bool, require: bool):
    needing = [m for m in config.metrics if resolve_metric(m).needs_mask]
    if needing and not has_masks:
        if require:
            raise PreconditionError(f"metrics {needing} need segmentation masks, dataset has none")
        logger.warning(f"Dataset has no masks; {needing} will be recorded as missing_mask")


def cmd_evaluate(args: argparse.Namespace, config: RunConfig) -> int:
    dataset, model = _load_inputs(config)
    _check_masks(config, dataset.has_masks, args.require_masks)
    scenes = select_samples(dataset.scenes, config.eval_samples, config.seed, "evaluate")
    attributions = None
    if config.attributions:
        attributions = AttributionArchive(Path(config.attributions)).load()

    engine = EvaluationEngine(config.workers)
    records = engine.evaluate(model, scenes, config.methods, config.metrics, config.method_config,
                              config.metric_config, config.seed, attributions)
    out = Path(config.out)
    store = ResultsStore(out / RESULTS_FILE)
    store.write(records)
    stats = ResultsStore.statistics(records)
    _write_json(out / RESULTS_SUMMARY, {
        "config": config.to_dict(),
        **store.summary(records),
        "statistics": {f"{method}/{metric}": s for (method, metric), s in stats.items()},
    })

    print_table("Mean oriented scores", ["method", *config.metrics],
                [[method, *[format_score(stats.get((method, metric), {}).get("oriented_mean"))
                            for metric in config.metrics]] for method in config.methods])
    print_table("Record status", ["metric", "status", "count"],
                [[metric, status, str(count)]
                 for metric, counts in ResultsStore.status_counts(records).items()
                 for status, count in counts.items()])
    return EXIT_OK


def cmd_meta(args: argparse.Namespace, config: RunConfig) -> int:
    dataset, model = _load_inputs(config)
    metrics = list(config.metrics)
    if args.irof_ablation:
        metrics += [v for v in IROF_ABLATION if v not in metrics]
    engine = EvaluationEngine(config.workers)
    result = run_meta_evaluation(model, dataset.scenes, config.methods, metrics, config.meta, config.seed,
                                 config.method_config, config.metric_config, engine=engine)
    out = Path(config.out)
    document = result.to_dict()
    document["run_config"] = config.to_dict()
    _write_json(out / META_FILE, document)
    render_mc_chart(document, out / CHART_NAME)

    rows = []
    for metric_id, entry in sorted(document["metrics"].items()):
        combined = entry["spaces"]["combined"]
        rows.append([metric_id, entry["category"],
                     *[format_score(combined[c]["mean"]) for c in ("iac_nr", "iac_ar", "iec_nr", "iec_ar")],
                     f"{format_score(combined['mc']['mean'])} ± {format_score(combined['mc']['std'])}"])
    print_table("Meta-evaluation", ["metric", "category", "IAC_NR", "IAC_AR", "IEC_NR", "IEC_AR", "MC"], rows)
    return EXIT_OK


def cmd_report(args: argparse.Namespace, config: RunConfig) -> int:
    builder = ReportBuilder(Path(config.out))
    path = builder.build(args.results, args.meta, config.to_dict())
    if builder.gaps:
        logger.warning(f"Report {path} has {len(builder.gaps)} gap(s): {', '.join(builder.gaps)}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "explain": cmd_explain,
    "evaluate": cmd_evaluate,
    "meta": cmd_meta,
    "report": cmd_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK

    try:
        config = build_run_config(args.profile, args.seed, _flag_overrides(args), args.config)
        logger.info(f"Running {args.command} with profile {config.profile}, seed {config.seed}")
        return COMMANDS[args.command](args, config)
    except ConfigError as e:
        logger.error(f"Usage error: {e}")
        return EXIT_USAGE
    except (PreconditionError, CorruptManifestError, ChecksumMismatchError, ModelFileError, FileNotFoundError) as e:
        logger.error(f"Missing or unreadable input: {e}")
        return EXIT_MISSING_INPUT
    except AttrExError as e:
        logger.critical(f"{args.command} failed: {e}")
        return EXIT_COMPUTATION
    except ValueError as e:
        logger.error(f"Invalid argument: {e}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
