"""
Command-line entry point.

    python cli.py train --config config/disro_config.yaml --variant disentangle
    python cli.py eval --ckpt runs/checkpoints/best.ckpt --attacks pgd,fgsm,cw,dlr,spsa --report runs/report.json
    python cli.py eval --ckpt runs/checkpoints/best.ckpt --attack pgd --eps 8 --steps 20 --alpha 2
    python cli.py detect --ckpt runs/checkpoints/best.ckpt --in samples/
    python cli.py sweep-iters --ckpt runs/checkpoints/best.ckpt --iters 10,20,50,100
    python cli.py export-embeddings --ckpt runs/checkpoints/best.ckpt --attacked
    python cli.py histogram --ckpt runs/checkpoints/best.ckpt --num-images 4
    python cli.py plot --from runs/losses.jsonl
    python cli.py plot --from runs/ds_histograms.csv
"""

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
import torch

from config import Config
from config.exceptions import (
    CheckpointError, ConfigurationError, DependencyError, NumericalError, ValidationError,
)
from config.logging_setup import configure_logging
from config.schema import (
    ATTACK_FLAG_LABELS, AttackSpec, RunConfig, config_from_dict, override_attack, read_config, write_config,
)
from services.datasets import ImageBatch, load_dataset, load_image_directory
from services.evaluator import (
    attack_dataset, detect, evaluate, export_embeddings, feature_histogram, histogram_frame, iteration_sweep,
    write_report,
)
from services.model.checkpoint import load_checkpoint
from services.plotting import plot_from, plot_histograms
from services.run_records import finish_manifest, start_manifest
from services.trainer import run_training

logger = logging.getLogger("disro")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="disro", description="Robust feature disentanglement toolkit")
    parser.add_argument("--config", help="Run config YAML (default: the checkpoint's config, else the shipped one)")
    parser.add_argument("--out-dir", help=f"Output directory (default: $DISRO_OUT_DIR or {Config.OUT_DIR})")
    parser.add_argument("--seed", type=int, help="Override train.seed / evaluation seed")
    parser.add_argument("--quiet", action="store_true", help="Warnings only, no progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a bundle")
    train.add_argument("--variant", choices=("disentangle", "natural", "at"), default="disentangle")
    train.add_argument("--resume", help="Checkpoint with trainer state to continue from")

    ev = sub.add_parser("eval", help="Evaluate a checkpoint and write report.json + CSV summary")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--attacks", help="Comma-separated attack labels (pgd,fgsm,cw,dlr,spsa)")
    ev.add_argument("--report", help="Report path (default: <out-dir>/report.json)")
    ev.add_argument("--surrogate-ckpt", help="Clean-trained surrogate for black-box transfer")
    ev.add_argument("--natural-ckpt", help="Natural model for two-path inference")
    ev.add_argument("--no-sweep", action="store_true", help="Skip the iteration sweep")
    _add_attack_flags(ev)

    det = sub.add_parser("detect", help="Flag adversarial images in a directory")
    det.add_argument("--ckpt", required=True)
    det.add_argument("--in", dest="input_dir", required=True)
    det.add_argument("--threshold", type=float)

    sweep = sub.add_parser("sweep-iters", help="Robust accuracy against attack iterations")
    sweep.add_argument("--ckpt", required=True)
    sweep.add_argument("--iters", default="10,20,50,100")
    _add_attack_flags(sweep)

    emb = sub.add_parser("export-embeddings", help="Write latent vectors as CSV")
    emb.add_argument("--ckpt", required=True)
    emb.add_argument("--branches", default="r,nr,ds")
    emb.add_argument("--attacked", action="store_true")
    emb.add_argument("--out", help="CSV path (default: <out-dir>/embeddings.csv)")
    _add_attack_flags(emb)

    hist = sub.add_parser("histogram", help="DS-feature intensity histograms, natural vs PGD")
    hist.add_argument("--ckpt", required=True)
    hist.add_argument("--num-images", type=int, default=4)
    _add_attack_flags(hist)

    plot = sub.add_parser("plot", help="Render figures from a loss log, embedding CSV or report")
    plot.add_argument("--from", dest="source", required=True)
    return parser


def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("attack override", "budgets in 8-bit pixel units (--eps 8 means 8/255)")
    group.add_argument("--attack", choices=tuple(ATTACK_FLAG_LABELS))
    group.add_argument("--eps", type=float)
    group.add_argument("--steps", type=int)
    group.add_argument("--alpha", type=float)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    out_dir = Path(args.out_dir) if args.out_dir else Config.OUT_DIR
    configure_logging("WARNING" if args.quiet else Config.LOG_LEVEL, out_dir / Config.LOG_FILE_NAME)

    handlers = {
        "train": cmd_train,
        "eval": cmd_eval,
        "detect": cmd_detect,
        "sweep-iters": cmd_sweep,
        "export-embeddings": cmd_export,
        "histogram": cmd_histogram,
        "plot": cmd_plot,
    }
    try:
        Config.validate(out_dir)
        if Config.NUM_THREADS:
            torch.set_num_threads(Config.NUM_THREADS)
        return handlers[args.command](args, out_dir)
    except (ConfigurationError, DependencyError, CheckpointError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    except (ValidationError, NumericalError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILED


# ============================================================
# COMMANDS
# ============================================================

def cmd_train(args, out_dir: Path) -> int:
    cfg = _apply_seed(read_config(args.config or Config.DEFAULT_CONFIG_PATH), args.seed)
    manifest = start_manifest(f"train:{args.variant}", cfg, cfg.train.seed)
    status = "failed"
    artifacts = {}
    try:
        dataset = load_dataset(cfg.dataset)
        logger.info(f"[Data] {dataset.summary()}")
        write_config(cfg, out_dir / "config.yaml")
        result = run_training(args.variant, cfg, dataset, out_dir=out_dir, resume=args.resume,
                              progress=not args.quiet)
        artifacts = {name: str(path) for name, path in result.checkpoints.items()}
        artifacts["losses"] = str(out_dir / Config.LOSS_LOG_NAME)
        artifacts["config"] = str(out_dir / "config.yaml")
        status = "completed"
        logger.info(f"[Train] done; best epoch {result.best_epoch} metric {result.best_metric}")
        return EXIT_OK
    finally:
        finish_manifest(manifest, out_dir, status, artifacts)


def cmd_eval(args, out_dir: Path) -> int:
    bundle, metadata, _ = load_checkpoint(args.ckpt, map_location=Config.resolve_device())
    cfg = _run_config(args, metadata)
    flagged = _flag_attack(args, cfg)
    if flagged is not None:
        if args.attacks:
            raise ConfigurationError("--attacks cannot be combined with --attack/--eps/--steps/--alpha")
        cfg = dataclasses.replace(cfg, evaluation=dataclasses.replace(cfg.evaluation, attacks=(flagged,)))
    seed = args.seed if args.seed is not None else cfg.train.seed
    manifest = start_manifest("eval", cfg, seed)
    status = "failed"
    artifacts = {}
    try:
        dataset = load_dataset(cfg.dataset)
        data = _evaluation_split(dataset)
        surrogate_path = args.surrogate_ckpt or cfg.evaluation.surrogate_ckpt
        natural_path = args.natural_ckpt or cfg.evaluation.natural_ckpt
        surrogate = load_checkpoint(surrogate_path, Config.resolve_device())[0] if surrogate_path else None
        natural = load_checkpoint(natural_path, Config.resolve_device())[0] if natural_path else None
        labels = _split_list(args.attacks) if args.attacks else None

        report = evaluate(bundle, data, cfg.evaluation, surrogate=surrogate, natural=natural,
                          train_subset=dataset.train, model_name=Path(args.ckpt).stem, seed=seed,
                          attack_labels=labels, sweep=not args.no_sweep, progress=not args.quiet)
        paths = write_report(report, args.report or out_dir / "report.json")
        artifacts = {name: str(p) for name, p in paths.items()}
        status = "completed"
        return EXIT_OK
    finally:
        finish_manifest(manifest, out_dir, status, artifacts)


def cmd_detect(args, out_dir: Path) -> int:
    bundle, metadata, _ = load_checkpoint(args.ckpt, map_location=Config.resolve_device())
    cfg = _run_config(args, metadata)
    threshold = args.threshold if args.threshold is not None else cfg.evaluation.detection_threshold
    _, h, w = cfg.model.input_shape
    pixels, paths = load_image_directory(args.input_dir, (h, w))
    names = [str(p) for p in paths]
    results = detect(bundle, pixels, threshold, cfg.evaluation.batch_size)
    frame = pd.DataFrame([{"file": name, **r} for name, r in zip(names, results)],
                         columns=["file", "is_adversarial", "score"])
    path = out_dir / "detections.csv"
    frame.to_csv(path, index=False, float_format="%.8g")
    flagged = int(frame["is_adversarial"].sum())
    logger.info(f"[Detect] {flagged}/{len(frame)} flagged adversarial at threshold {threshold} -> {path}")
    return EXIT_OK


def cmd_sweep(args, out_dir: Path) -> int:
    bundle, metadata, _ = load_checkpoint(args.ckpt, map_location=Config.resolve_device())
    cfg = _run_config(args, metadata)
    data = _evaluation_split(load_dataset(cfg.dataset)).head(cfg.evaluation.max_samples)
    iterations = [int(t) for t in _split_list(args.iters)]
    curve = iteration_sweep(bundle, data, iterations, _attack_for(args, cfg), cfg.evaluation.batch_size)
    path = out_dir / "iteration_sweep.csv"
    pd.DataFrame(curve, columns=["num_steps", "accuracy"]).to_csv(path, index=False)
    logger.info(f"[Sweep] -> {path}")
    return EXIT_OK


def cmd_export(args, out_dir: Path) -> int:
    bundle, metadata, _ = load_checkpoint(args.ckpt, map_location=Config.resolve_device())
    cfg = _run_config(args, metadata)
    data = _evaluation_split(load_dataset(cfg.dataset)).head(cfg.evaluation.max_samples)
    export_embeddings(bundle, data, _split_list(args.branches), attacked=args.attacked,
                      spec=_attack_for(args, cfg), path=args.out or out_dir / "embeddings.csv",
                      batch_size=cfg.evaluation.batch_size)
    return EXIT_OK


def cmd_histogram(args, out_dir: Path) -> int:
    bundle, metadata, _ = load_checkpoint(args.ckpt, map_location=Config.resolve_device())
    cfg = _run_config(args, metadata)
    data = _evaluation_split(load_dataset(cfg.dataset)).head(args.num_images)
    adversarial = attack_dataset(bundle, data, _attack_for(args, cfg), cfg.evaluation.batch_size)
    histograms = {
        "nat": feature_histogram(bundle, data.pixels),
        "adv": feature_histogram(bundle, adversarial.pixels),
    }
    path = out_dir / "ds_histograms.csv"
    histogram_frame(histograms).to_csv(path, index=False, float_format="%.8g")
    logger.info(f"[Histogram] {len(data)} images -> {path}")
    plot_histograms(histograms, out_dir / "ds_histograms.png")
    return EXIT_OK


def cmd_plot(args, out_dir: Path) -> int:
    plot_from(args.source, out_dir, seed=args.seed or 0)
    return EXIT_OK


# ============================================================
# HELPERS
# ============================================================

def _run_config(args, metadata) -> RunConfig:
    if args.config:
        cfg = read_config(args.config)
    else:
        cfg = config_from_dict(metadata["config"])
    return _apply_seed(cfg, args.seed)


def _apply_seed(cfg: RunConfig, seed: Optional[int]) -> RunConfig:
    if seed is None:
        return cfg
    return dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=seed))


def _evaluation_split(dataset) -> ImageBatch:
    if len(dataset.test):
        return dataset.test
    logger.warning("Test split is empty; evaluating on the validation split")
    if len(dataset.val):
        return dataset.val
    raise ConfigurationError("Dataset has neither a test nor a validation split to evaluate on")


def _reference_attack(cfg: RunConfig):
    for spec in cfg.evaluation.attacks:
        if spec.label == "pgd":
            return spec
    return cfg.train.early_stopping.eval_attack


def _flag_attack(args, cfg: RunConfig) -> Optional[AttackSpec]:
    """The attack described by --attack/--eps/--steps/--alpha, or None when no flag is set."""
    if all(getattr(args, name, None) is None for name in ("attack", "eps", "steps", "alpha")):
        return None
    base = _reference_attack(cfg)
    if args.attack is not None:
        base = next((s for s in cfg.evaluation.attacks if s.label == args.attack), base)
    spec = override_attack(base, args.attack, epsilon=args.eps, num_steps=args.steps, step_size=args.alpha)
    logger.info(f"[Attack] command-line override: {spec.describe()}")
    return spec


def _attack_for(args, cfg: RunConfig) -> AttackSpec:
    return _flag_attack(args, cfg) or _reference_attack(cfg)


def _split_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(",") if item.strip()]


if __name__ == "__main__":
    sys.exit(main())
