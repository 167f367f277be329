"""
Command line entry point.

    apga generate-data --config cfg.json --out data/synthetic
    apga train --config cfg.json --seeds 5 --aug none cutout gradcam apga
    apga eval --run runs/apga/apga_seed0 --split test
    apga mask-quality --run runs/apga/apga_seed0
    apga verify --out runs/verify
    apga plot --run runs/apga/apga_seed0

Exit codes: 0 ok, 1 runtime failure, 2 usage or config error.
"""

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from apga.data import Dataset, SyntheticSpec, generate, load_folder, save_dataset
from apga.errors import ConfigError
from apga.harness.config import (
    DatasetConfig,
    ExperimentConfig,
    load_experiment_config,
    load_reference_classifier,
    load_run_models,
    save_experiment_config,
)
from apga.harness.mask_quality import gradcam_masks, mask_quality, policy_masks
from apga.harness.metrics_log import read_metrics
from apga.harness.plot_utils import plot_mask_gallery, plot_summary, plot_training_curves
from apga.masking import export_mask_png
from apga.trainer import AUGMENTATIONS, evaluate, run
from apga.verify import CHECK_GROUPS, run_verification

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2


def load_dataset(cfg: DatasetConfig) -> Dataset:
    if cfg.source == "folder":
        return load_folder(cfg.path, image_size=cfg.image_size)
    return generate(cfg.synthetic)


def worker_count(n_runs: int) -> int:
    """Seed-level parallelism, capped by APGA_THREADS (default 1)."""
    raw = os.environ.get("APGA_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"APGA_THREADS must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"APGA_THREADS must be >= 1, got {threads}")
    return max(1, min(threads, n_runs))


# ----------------------------------------------------------------------------
# Summaries
# ----------------------------------------------------------------------------
def final_accuracy(metrics_csv: Path) -> float:
    acc = read_metrics(metrics_csv)["val_accuracy"].dropna()
    if len(acc) == 0:
        raise ValueError(f"{metrics_csv} has no validation accuracy")
    return float(acc.iloc[-1])


def summarize_runs(exp_dir: Path, run_dirs: Optional[Sequence[Path]] = None) -> Dict:
    """mean / std (ddof=1) of the final validation accuracy per augmentation, from the per-run CSVs."""
    exp_dir = Path(exp_dir)
    if run_dirs is None:
        run_dirs = sorted(p.parent for p in exp_dir.glob("*/metrics.csv"))
    per_aug: Dict[str, List[dict]] = {}
    for rd in run_dirs:
        cfg = load_experiment_config(rd / "config.json")
        per_aug.setdefault(cfg.train.augmentation, []).append(
            {"seed": cfg.train.seed, "accuracy": final_accuracy(rd / "metrics.csv"), "run_dir": rd.name}
        )
    summary = {"experiment": exp_dir.name, "augmentations": {}}
    for aug in [a for a in AUGMENTATIONS if a in per_aug]:
        runs = sorted(per_aug[aug], key=lambda r: r["seed"])
        acc = np.array([r["accuracy"] for r in runs], dtype=np.float64)
        summary["augmentations"][aug] = {
            "n": len(runs),
            "mean_accuracy": float(acc.mean()),
            "std_accuracy": float(acc.std(ddof=1)) if len(acc) > 1 else 0.0,
            "runs": runs,
        }
    (exp_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf8")
    return summary


# ----------------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------------
def _experiment_from_args(args) -> ExperimentConfig:
    cfg = load_experiment_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    elif getattr(args, "seeds", None) is not None:
        cfg.seeds = list(range(args.seeds))
    if getattr(args, "aug", None):
        cfg.augmentations = list(args.aug)
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "precision", None):
        cfg.train = replace(cfg.train, precision=args.precision)
    if getattr(args, "steps", None):
        cfg.train = replace(cfg.train, steps=args.steps)
    return cfg.validate()


def _export_masks(run_dir: Path, cfg: ExperimentConfig, dataset: Dataset) -> None:
    _, _, policy = load_run_models(run_dir)
    val = dataset.split("val")
    n = min(cfg.export.num_masks, len(val))
    masks = policy_masks(policy, dataset, "val")[:n]
    for sid, mask in zip(val.ids[:n], masks):
        export_mask_png(mask, run_dir / "masks" / f"{sid}.png")


def _train_one(cfg: ExperimentConfig, dataset: Dataset, run_dir: Path, resume: bool) -> Path:
    save_experiment_config(cfg, run_dir / "config.json")
    run(cfg.train, dataset, run_dir=run_dir, resume=resume)
    if cfg.export.masks:
        _export_masks(run_dir, cfg, dataset)
    return run_dir


def cli_train(args) -> int:
    cfg = _experiment_from_args(args)
    dataset = load_dataset(cfg.dataset)
    exp_dir = Path(cfg.output_dir) / cfg.name
    jobs = [(aug, seed) for aug in cfg.augmentations for seed in cfg.seeds]
    workers = worker_count(len(jobs))
    logger.info("training %d runs with %d worker(s) into %s", len(jobs), workers, exp_dir)

    def _job(aug_seed):
        aug, seed = aug_seed
        run_cfg = cfg.for_run(aug, seed)
        if workers > 1:
            run_cfg.train = replace(run_cfg.train, progress=False)
        return _train_one(run_cfg, dataset, exp_dir / f"{aug}_seed{seed}", args.resume)

    with ThreadPoolExecutor(max_workers=workers) as executor:
        run_dirs = list(executor.map(_job, jobs))

    summary = summarize_runs(exp_dir, run_dirs)
    # pyplot is not thread-safe, so plots are drawn after the pool is done
    if cfg.export.plots:
        for rd in run_dirs:
            plot_training_curves(rd / "metrics.csv", rd / "curves.svg", title=rd.name)
        plot_summary(summary, exp_dir / "summary.svg")
    for aug, s in summary["augmentations"].items():
        print(f"{aug:8s} accuracy {s['mean_accuracy']:.4f} +- {s['std_accuracy']:.4f} (n={s['n']})")
    return EXIT_OK


def cli_eval(args) -> int:
    cfg, classifier, _ = load_run_models(args.run)
    dataset = load_dataset(cfg.dataset)
    acc = evaluate(classifier, dataset.split(args.split), cfg.train.eval_batch_size)
    result = {"run_dir": str(args.run), "split": args.split, "accuracy": acc}
    (Path(args.run) / f"eval_{args.split}.json").write_text(json.dumps(result, indent=2), encoding="utf8")
    print(json.dumps(result))
    return EXIT_OK


def cli_mask_quality(args) -> int:
    cfg = load_experiment_config(Path(args.run) / "config.json")
    report = mask_quality(args.run, load_dataset(cfg.dataset), split=args.split, seed=cfg.train.seed)
    print(json.dumps({k: v for k, v in report.to_json().items() if k != "per_sample_iou"}, indent=2))
    return EXIT_OK


def cli_generate_data(args) -> int:
    spec = load_experiment_config(args.config).dataset.synthetic if args.config else SyntheticSpec()
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    root = save_dataset(generate(spec), args.out)
    print(f"wrote synthetic dataset to {root}")
    return EXIT_OK


def cli_verify(args) -> int:
    report = run_verification(args.groups, seed=args.seed, quick=args.quick)
    print(report.to_text())
    if args.out:
        report.write(args.out)
    return EXIT_OK if report.passed else EXIT_FAILURE


def cli_plot(args) -> int:
    run_dir = Path(args.run)
    plot_training_curves(run_dir / "metrics.csv", run_dir / "curves.svg", title=run_dir.name)
    cfg, classifier, policy = load_run_models(run_dir)
    dataset = load_dataset(cfg.dataset)
    val = dataset.split("val")
    n = min(cfg.export.num_masks, len(val))
    gc = None
    try:
        gc = gradcam_masks(load_reference_classifier(run_dir, cfg, dataset.num_classes), dataset, "val")[:n]
    except FileNotFoundError as e:
        logger.warning("gallery without Grad-CAM row: %s", e)
    plot_mask_gallery(val.images[:n], policy_masks(policy, dataset, "val")[:n], gc, run_dir / "gallery.png", val.ids[:n])
    print(f"wrote {run_dir / 'curves.svg'} and {run_dir / 'gallery.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    pa = argparse.ArgumentParser(prog="apga", description="Adversarial policy gradient augmentation experiments")
    pa.add_argument("-v", "--verbose", action="store_true")
    sub = pa.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic ROI dataset to disk")
    p.add_argument("--config", type=str, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cli_generate_data)

    p = sub.add_parser("train", help="train one run per (augmentation, seed)")
    p.add_argument("--config", type=str, default=None)
    seeds = p.add_mutually_exclusive_group()
    seeds.add_argument("--seed", type=int, default=None)
    seeds.add_argument("--seeds", type=int, default=None, help="run seeds 0..N-1")
    p.add_argument("--aug", nargs="+", choices=AUGMENTATIONS, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--precision", choices=("fp32", "fp64"), default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cli_train)

    p = sub.add_parser("eval", help="accuracy of a trained run on a split")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.set_defaults(func=cli_eval)

    p = sub.add_parser("mask-quality", help="IoU of aiding masks against the true ROI")
    p.add_argument("--run", type=str, required=True)
    p.add_argument("--split", choices=("val", "test"), default="val")
    p.set_defaults(func=cli_mask_quality)

    p = sub.add_parser("verify", help="gradient and estimator checks")
    p.add_argument("--groups", nargs="+", choices=list(CHECK_GROUPS), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true")
    p.add_argument("--out", type=str, default=None)
    p.set_defaults(func=cli_verify)

    p = sub.add_parser("plot", help="training curves and mask gallery of a run")
    p.add_argument("--run", type=str, required=True)
    p.set_defaults(func=cli_plot)
    return pa


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.exception("command %s failed", args.command)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
