#!/usr/bin/env python3
"""
Benchmark Script - synthetic ROI task
Trains every augmentation over five seeds, then compares accuracy and mask IoU
"""

import json
import logging
import sys
from pathlib import Path

from apga.data import generate
from apga.harness.cli import main as cli_main
from apga.harness.config import load_experiment_config
from apga.harness.mask_quality import mask_quality

# -----------------------------------------------------------------------------
# Configuration
# -----------------------------------------------------------------------------
PROJECT_ROOT = Path(__file__).resolve().parent.parent
CONFIG_PATH = PROJECT_ROOT / "src" / "apga" / "configs" / "experiments" / "synthetic_reference.json"
OUT_DIR = PROJECT_ROOT / "runs"
ACCURACY_MARGIN = 0.01  # APGA may trail the no-augmentation baseline by at most 1 point
MIN_IOU = 0.3
MIN_IOU_OVER_RANDOM = 2.0

logger = logging.getLogger("run_benchmark")


def main() -> int:
    cfg = load_experiment_config(CONFIG_PATH)
    code = cli_main(["train", "--config", str(CONFIG_PATH), "--out", str(OUT_DIR)])
    if code != 0:
        logger.error("training failed with exit code %d", code)
        return code

    exp_dir = OUT_DIR / cfg.name
    summary = json.loads((exp_dir / "summary.json").read_text(encoding="utf8"))["augmentations"]
    dataset = generate(cfg.dataset.synthetic)

    ious, random_ious = [], []
    for seed in cfg.seeds:
        report = mask_quality(exp_dir / f"apga_seed{seed}", dataset)
        ious.append(report.mean_iou)
        random_ious.append(report.random_mean_iou)
    mean_iou = sum(ious) / len(ious)
    mean_random = sum(random_ious) / len(random_ious)

    checks = {
        "apga_vs_none": summary["apga"]["mean_accuracy"] >= summary["none"]["mean_accuracy"] - ACCURACY_MARGIN,
        "mask_iou": mean_iou >= MIN_IOU,
        "mask_iou_vs_random": mean_iou >= MIN_IOU_OVER_RANDOM * mean_random,
    }
    print("=== synthetic benchmark ===")
    for aug, s in summary.items():
        print(f"  {aug:8s} {s['mean_accuracy']:.4f} +- {s['std_accuracy']:.4f}")
    print(f"  APGA mask IoU {mean_iou:.4f} (area-matched random {mean_random:.4f})")
    for name, ok in checks.items():
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}")
    (exp_dir / "benchmark.json").write_text(
        json.dumps({"checks": checks, "mean_iou": mean_iou, "random_iou": mean_random}, indent=2), encoding="utf8"
    )
    return 0 if all(checks.values()) else 1


if __name__ == "__main__":
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    sys.exit(main())
