"""
mask_quality.py
----
How well aiding masks recover the ground-truth ROI of a synthetic dataset.

Main features
----
• iou: per-sample intersection-over-union of binary masks.
• area_matched_random_masks: permutation baseline with the same number of kept pixels per sample.
• score_masks: IoU summary, random-mask baseline and keep-fraction histogram.
• mask_quality: score a trained run's policy (and its Grad-CAM reference) on one split.
"""

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
import torch

from apga.baselines import gradcam_mask
from apga.data import Dataset, make_batch
from apga.harness.config import load_reference_classifier, load_run_models
from apga.masking import predict_masks

logger = logging.getLogger(__name__)


def iou(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-sample IoU of N x H x W binary masks; two empty masks score 1."""
    pred = np.asarray(pred).reshape(len(pred), -1).astype(bool)
    truth = np.asarray(truth).reshape(len(truth), -1).astype(bool)
    inter = (pred & truth).sum(axis=1)
    union = (pred | truth).sum(axis=1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def area_matched_random_masks(masks: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    flat = np.asarray(masks).reshape(len(masks), -1).astype(bool)
    out = np.zeros_like(flat)
    for i, row in enumerate(flat):
        out[i, rng.permutation(row.size)[: int(row.sum())]] = True
    return out.reshape(np.shape(masks)).astype(np.uint8)


@dataclass
class MaskQualityReport:
    n: int
    mean_iou: float
    median_iou: float
    random_mean_iou: float
    mean_keep_fraction: float
    keep_fraction_hist: List[int]
    keep_fraction_edges: List[float]
    per_sample_iou: List[float] = field(repr=False, default_factory=list)
    gradcam_mean_iou: Optional[float] = None

    def to_json(self) -> dict:
        return asdict(self)


def score_masks(masks: np.ndarray, roi: np.ndarray, seed: int = 0, bins: int = 10) -> MaskQualityReport:
    masks = np.asarray(masks).reshape(np.shape(roi))
    scores = iou(masks, roi)
    random_scores = iou(area_matched_random_masks(masks, np.random.default_rng(seed)), roi)
    keep = masks.reshape(len(masks), -1).mean(axis=1)
    hist, edges = np.histogram(keep, bins=bins, range=(0.0, 1.0))
    return MaskQualityReport(
        n=len(scores),
        mean_iou=float(scores.mean()),
        median_iou=float(np.median(scores)),
        random_mean_iou=float(random_scores.mean()),
        mean_keep_fraction=float(keep.mean()),
        keep_fraction_hist=hist.tolist(),
        keep_fraction_edges=edges.tolist(),
        per_sample_iou=scores.tolist(),
    )


def policy_masks(policy: torch.nn.Module, dataset: Dataset, split: str = "val", batch_size: int = 100) -> np.ndarray:
    sp = dataset.split(split)
    dtype = next(policy.parameters()).dtype
    out = [
        predict_masks(policy, make_batch(sp, idx, dtype)).numpy()[:, 0]
        for idx in torch.arange(len(sp)).split(batch_size)
    ]
    return np.concatenate(out)


def gradcam_masks(classifier: torch.nn.Module, dataset: Dataset, split: str = "val", batch_size: int = 100) -> np.ndarray:
    sp = dataset.split(split)
    dtype = next(classifier.parameters()).dtype
    out = [
        gradcam_mask(classifier, make_batch(sp, idx, dtype)).numpy()[:, 0]
        for idx in torch.arange(len(sp)).split(batch_size)
    ]
    return np.concatenate(out)


def mask_quality(
    run_dir: Union[str, Path],
    dataset: Dataset,
    split: str = "val",
    seed: int = 0,
    include_gradcam: bool = True,
) -> MaskQualityReport:
    """Score the run's aiding masks against the true ROI; writes mask_quality.json into run_dir."""
    run_dir = Path(run_dir)
    roi = dataset.roi_masks(split)
    cfg, classifier, policy = load_run_models(run_dir)
    report = score_masks(policy_masks(policy, dataset, split), roi, seed=seed)

    if include_gradcam:
        try:
            reference = load_reference_classifier(run_dir, cfg, dataset.num_classes)
        except FileNotFoundError as e:
            logger.warning("skipping Grad-CAM mask quality: %s", e)
        else:
            report.gradcam_mean_iou = float(iou(gradcam_masks(reference, dataset, split), roi).mean())

    (run_dir / "mask_quality.json").write_text(json.dumps(report.to_json(), indent=2), encoding="utf8")
    logger.info(
        "mask quality %s: mean IoU %.4f (random %.4f)", run_dir, report.mean_iou, report.random_mean_iou
    )
    return report
