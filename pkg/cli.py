"""
Command-line entry point: synth | train | attribute | eval | render | axioms.

Every command reads one JSON run config (optional) with flag overrides and
writes its artifacts under the configured directories. Exit codes: 0 on
success, 1 on any failure, 2 on configuration errors.
"""

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional

import config
from attribution import AttributionSettings, Method, attribute, encode_attribution, read_attribution, saliency_csv
from axioms import format_report, report_json, run_battery
from baseline import make_baseline, pool_provenance_csv
from checkpoint import load_checkpoint, save_checkpoint
from data_io import generate_synthetic, load_dataset, load_split, read_bag, write_dataset
from errors import ConfigError, DatasetError, EvaluationError, MilCigError
from evaluation import (BASELINE_STREAM, EG_STREAM, EvaluationSettings, Evaluator, render_table, slide_seed)
from heatmap import encode_png, encode_ppm, heatmap_pixels
from run_history import RunHistory
from scheduler import SlideScheduler
from storage import ArtifactStore
from trainer import evaluate_accuracy, train

logger = logging.getLogger(__name__)


def cmd_synth(cfg: config.RunConfig, args) -> int:
    """Generate the synthetic dataset into cfg.dataset_dir."""
    dataset = generate_synthetic(cfg.synthetic_config())
    write_dataset(dataset, cfg.dataset_dir)
    counts = {name: len(dataset.manifest.records(name)) for name in ("train", "val", "test")}
    print(f"Synthetic dataset written to {cfg.dataset_dir}: {len(dataset.bags)} slides {counts}")
    return 0


def cmd_train(cfg: config.RunConfig, args) -> int:
    """Train on the train split and save the checkpoint."""
    manifest, bags = load_dataset(cfg.dataset_dir)
    train_bags = load_split(manifest, bags, "train")
    model, history = train(train_bags, cfg.train_config(), n_classes=len(manifest.class_names))
    save_checkpoint(model, cfg.checkpoint)

    summary: Dict = {"history": history, "train_accuracy": evaluate_accuracy(model, train_bags)}
    held_out = load_split(manifest, bags, cfg.eval_split)
    if held_out:
        summary[f"{cfg.eval_split}_accuracy"] = evaluate_accuracy(model, held_out)
    ArtifactStore(cfg.output_dir).put_text("train_history.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"Checkpoint saved to {cfg.checkpoint}; "
          + ", ".join(f"{k}={v:.3f}" for k, v in summary.items() if k.endswith("accuracy")))
    return 0


def _selected_slides(cfg: config.RunConfig, manifest, bags, slide_ids: Optional[List[str]], n_classes: int) -> List:
    if slide_ids:
        missing = [s for s in slide_ids if s not in bags]
        if missing:
            raise DatasetError(f"unknown slide ids: {', '.join(missing)}")
        return [bags[s] for s in sorted(slide_ids)]
    classes = cfg.eval_classes if cfg.eval_classes is not None else list(range(1, n_classes))
    return [bag for bag in load_split(manifest, bags, cfg.eval_split) if bag.label in classes]


def cmd_attribute(cfg: config.RunConfig, args) -> int:
    """Attribute the selected slides with every configured gradient method."""
    model = load_checkpoint(cfg.checkpoint)
    manifest, bags = load_dataset(cfg.dataset_dir)
    train_bags = load_split(manifest, bags, "train")
    slides = _selected_slides(cfg, manifest, bags, getattr(args, "slide", None), model.n_classes)
    if not slides:
        raise EvaluationError("no slides selected for attribution")
    methods = [m for m in cfg.methods if Method(m).is_gradient_based]
    skipped = [m for m in cfg.methods if m not in methods]
    if skipped:
        logger.info(f"Skipping saliency-only methods: {', '.join(skipped)}")

    settings = AttributionSettings.from_run_config(cfg)
    base_seed = cfg.seeds[0]
    evaluator = Evaluator(model, train_bags, EvaluationSettings.from_run_config(cfg))
    for target_class in sorted({bag.label for bag in slides}):
        evaluator.pool_for(target_class, base_seed)

    def job(bag):
        seed = slide_seed(base_seed, bag.slide_id)
        pool = evaluator.pools[(bag.label, base_seed)]
        baseline = make_baseline(cfg.baseline_strategy, bag, pool, train_bags, seed=(seed, BASELINE_STREAM))
        return {m: attribute(m, model, bag.features64(), baseline, pool, settings, seed=(seed, EG_STREAM))
                for m in methods}

    scheduler = SlideScheduler(config.get_thread_count(cfg.threads), RunHistory())
    for bag in slides:
        scheduler.submit(bag.slide_id, lambda bag=bag: job(bag))
    messages = scheduler.run()

    store = ArtifactStore(cfg.output_dir)
    spec = cfg.heatmap_spec()
    for (target_class, _), pool in sorted(evaluator.pools.items()):
        store.put_text(f"attributions/pool_class{target_class}.csv", pool_provenance_csv(pool))
    failures = 0
    for message in messages:
        if message["error"]:
            print(f"❌ {message['key']}: {message['error']}", file=sys.stderr)
            failures += 1
            continue
        bag = bags[message["key"]]
        for method, result in message["result"].items():
            prefix = f"attributions/{bag.slide_id}/{method}"
            store.put_bytes(f"{prefix}.attr", encode_attribution(result))
            store.put_text(f"{prefix}.csv", saliency_csv(result, bag.coords))
            if cfg.emit_steps and result.step_saliency:
                for j, (_, step_saliency) in enumerate(result.step_saliency):
                    store.put_bytes(f"{prefix}_steps/step_{j:04d}.ppm",
                                    encode_ppm(heatmap_pixels(bag.coords, step_saliency, spec)))
    print(f"Attributed {len(slides) - failures}/{len(slides)} slides with {', '.join(methods)}")
    return 1 if failures else 0


def cmd_eval(cfg: config.RunConfig, args) -> int:
    """MIL-AIC / MIL-SIC evaluation of every configured method."""
    model = load_checkpoint(cfg.checkpoint)
    manifest, bags = load_dataset(cfg.dataset_dir)
    evaluator = Evaluator(model, load_split(manifest, bags, "train"), EvaluationSettings.from_run_config(cfg))
    report = evaluator.run(load_split(manifest, bags, cfg.eval_split))

    table = render_table(report.rows, manifest.class_names)
    store = ArtifactStore(cfg.output_dir)
    store.put_text("bins.csv", report.bins_csv())
    store.put_text("curves.csv", report.curves_csv())
    store.put_text("summary.json", report.summary_json())
    store.put_text("table.txt", table)
    print(table, end="")
    return 0


def cmd_render(cfg: config.RunConfig, args) -> int:
    """Heatmap of one ATTR1 result on its bag's patch grid."""
    result = read_attribution(args.attribution)
    bag = read_bag(args.bag)
    if result.n != bag.n:
        raise DatasetError(f"attribution has {result.n} patches but bag {bag.slide_id} has {bag.n}")
    heatmap = dict(cfg.heatmap)
    if args.colormap:
        heatmap["colormap"] = args.colormap
    if args.cell_size:
        heatmap["cell_size"] = args.cell_size
    spec = replace(cfg, heatmap=heatmap).heatmap_spec()

    pixels = heatmap_pixels(bag.coords, result.saliency, spec)
    store = ArtifactStore(cfg.output_dir)
    name = f"heatmaps/{bag.slide_id}_{result.method}"
    path = store.put_bytes(f"{name}.ppm", encode_ppm(pixels))
    if args.png:
        store.put_bytes(f"{name}.png", encode_png(pixels))
    print(f"Heatmap written to {path}")
    return 0


def cmd_axioms(cfg: config.RunConfig, args) -> int:
    """Run the axiom battery; exit 0 only if every check passes."""
    results = run_battery(scale=args.scale, seed=0)
    ArtifactStore(cfg.output_dir).put_text("axioms.json", report_json(results))
    print(format_report(results))
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "eval": cmd_eval,
    "render": cmd_render,
    "axioms": cmd_axioms,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="JSON run config")
    common.add_argument("--output-dir", type=str, default=None, help="Directory for run artifacts")
    common.add_argument("--seed", type=int, default=None, help="Base seed (replaces the config's seed list)")
    common.add_argument("--threads", type=int, default=None, help="Worker threads")
    common.add_argument("--log-level", type=str, default=None, help="Logging level (DEBUG, INFO, ...)")

    parser = argparse.ArgumentParser(description="Contrastive integrated gradients for MIL bag classifiers")
    subparsers = parser.add_subparsers(dest="command", help="Command")

    subparsers.add_parser("synth", parents=[common], help="Generate the synthetic dataset")
    subparsers.add_parser("train", parents=[common], help="Train the attention MIL classifier")

    attribute_parser = subparsers.add_parser("attribute", parents=[common], help="Attribute slides")
    attribute_parser.add_argument("--methods", type=str, default=None, help="Comma-separated method names")
    attribute_parser.add_argument("--slide", action="append", default=None, help="Slide id (repeatable)")
    attribute_parser.add_argument("--emit-steps", action="store_true", default=None,
                                  help="Write one heatmap per interpolation step")

    eval_parser = subparsers.add_parser("eval", parents=[common], help="MIL-AIC / MIL-SIC evaluation")
    eval_parser.add_argument("--methods", type=str, default=None, help="Comma-separated method names")

    render_parser = subparsers.add_parser("render", parents=[common], help="Render a saliency heatmap")
    render_parser.add_argument("--attribution", type=str, required=True, help="ATTR1 file")
    render_parser.add_argument("--bag", type=str, required=True, help="FBAG1 file of the same slide")
    render_parser.add_argument("--colormap", type=str, choices=["grayscale", "diverging"], default=None)
    render_parser.add_argument("--cell-size", type=int, default=None, help="Pixels per patch cell")
    render_parser.add_argument("--png", action="store_true", help="Also write a PNG")

    axioms_parser = subparsers.add_parser("axioms", parents=[common], help="Run the axiom battery")
    axioms_parser.add_argument("--scale", type=float, default=1.0, help="Multiplier on random trial counts")
    return parser


def _overrides(args) -> Dict:
    overrides = {
        "output_dir": args.output_dir,
        "threads": args.threads,
        "seeds": [args.seed] if args.seed is not None else None,
        "emit_steps": getattr(args, "emit_steps", None),
    }
    methods = getattr(args, "methods", None)
    if methods:
        overrides["methods"] = [m.strip() for m in methods.split(",") if m.strip()]
    return overrides


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 2

    level = (args.log_level or config.get_log_level()).upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO), format=config.LOG_FORMAT)

    try:
        cfg = config.load_run_config(args.config, _overrides(args))
        Path(cfg.output_dir).mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"Config error: {e}", file=sys.stderr)
        return 2
    except (MilCigError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
