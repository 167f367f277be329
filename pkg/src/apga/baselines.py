"""
baselines.py
----
Comparison augmentations for the classifier: cutout and Grad-CAM keep-masks.

Main features
----
• sample_cutout_boxes / cutout: randomly sized zeroed rectangles, always fully inside the image.
• gradcam_mask: saliency of the predicted class at the final conv layer, discretized at 0.5.
• CutoutAugmenter / GradCamAugmenter: per-step augmenters used by the trainer's baseline modes.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from apga.data import ImageBatch
from apga.errors import ConfigError, UnsupportedError
from apga.masking import MaskBatch, MaskMode, apply_mask
from apga.utils.misc import make_generator

logger = logging.getLogger(__name__)


@dataclass
class CutoutConfig:
    min_fraction: float = 0.1
    max_fraction: float = 0.5
    patches: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.min_fraction <= self.max_fraction <= 1.0:
            raise ConfigError(
                f"cutout needs 0 < min_fraction <= max_fraction <= 1, got "
                f"[{self.min_fraction}, {self.max_fraction}]"
            )
        if self.patches < 1:
            raise ConfigError(f"cutout patches must be >= 1, got {self.patches}")


def sample_cutout_boxes(
    n: int, height: int, width: int, config: CutoutConfig, generator: torch.Generator
) -> torch.Tensor:
    """
    Returns an n x patches x 4 int64 tensor of (top, left, h, w) boxes.

    Side lengths are round(u * side) with u ~ U[min_fraction, max_fraction],
    drawn independently for height and width; the box is then placed
    uniformly among the positions that keep it fully inside the image.
    """
    shape = (n, config.patches)
    span = config.max_fraction - config.min_fraction
    fh = config.min_fraction + span * torch.rand(shape, generator=generator, dtype=torch.float64)
    fw = config.min_fraction + span * torch.rand(shape, generator=generator, dtype=torch.float64)
    h = torch.round(fh * height).long().clamp(1, height)
    w = torch.round(fw * width).long().clamp(1, width)
    u = torch.rand(shape + (2,), generator=generator, dtype=torch.float64)
    top = torch.floor(u[..., 0] * (height - h + 1)).long()
    left = torch.floor(u[..., 1] * (width - w + 1)).long()
    return torch.stack([top, left, h, w], dim=-1)


def cutout(batch: ImageBatch, config: CutoutConfig, generator: torch.Generator) -> ImageBatch:
    B, _, H, W = batch.images.shape
    boxes = sample_cutout_boxes(B, H, W, config, generator)
    keep = torch.ones_like(batch.images)
    for i in range(B):
        for top, left, h, w in boxes[i].tolist():
            keep[i, :, top : top + h, left : left + w] = 0
    return apply_mask(batch, keep)


def _final_conv_features(classifier: nn.Module, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """(final conv activation, logits) with the activation kept in the graph."""
    if hasattr(classifier, "features") and hasattr(classifier, "head"):
        if hasattr(classifier, "check_input"):
            classifier.check_input(x)
        feats = classifier.features(x)
        return feats, classifier.head(feats)

    convs = [m for m in classifier.modules() if isinstance(m, nn.Conv2d)]
    if not convs:
        raise UnsupportedError(f"{type(classifier).__name__} has no conv layer for Grad-CAM")
    captured = {}

    def _save_activations(module, inp, out):
        captured["feats"] = out

    handle = convs[-1].register_forward_hook(_save_activations)
    try:
        logits = classifier(x)
    finally:
        handle.remove()
    return captured["feats"], logits


def gradcam_mask(classifier: nn.Module, batch: ImageBatch) -> MaskBatch:
    """
    Grad-CAM keep-mask of the predicted class (argmax, ties to the lower index).

    Channel weights are spatially averaged gradients of the class logit; the
    ReLU of the weighted feature sum is upsampled bilinearly, min-max
    normalized per image and thresholded at 0.5. A flat map yields an
    all-zeros mask.
    """
    # the input carries the graph so frozen reference weights still work
    x = batch.images.detach().requires_grad_(True)
    with torch.enable_grad():
        feats, logits = _final_conv_features(classifier, x)
        pred = logits.argmax(dim=1)
        score = logits.gather(1, pred[:, None]).sum()
        (grads,) = torch.autograd.grad(score, feats)

    weights = grads.mean(dim=(2, 3), keepdim=True)
    cam = F.relu((weights * feats.detach()).sum(dim=1, keepdim=True))
    cam = F.interpolate(cam, size=x.shape[-2:], mode="bilinear", align_corners=False)

    flat = cam.flatten(1)
    lo, hi = flat.min(dim=1).values, flat.max(dim=1).values
    span = hi - lo
    # a constant map only survives bilinear resampling up to rounding
    degenerate = span <= 8 * torch.finfo(cam.dtype).eps * hi.abs()
    if degenerate.any():
        logger.warning("Grad-CAM map is flat for %d of %d images; using empty masks", int(degenerate.sum()), len(x))
    norm = (cam - lo[:, None, None, None]) / torch.where(degenerate, torch.ones_like(span), span)[:, None, None, None]
    keep = (norm > 0.5) & ~degenerate[:, None, None, None]
    return MaskBatch(keep.to(x.dtype), MaskMode.AIDING)


class CutoutAugmenter:
    name = "cutout"

    def __init__(self, config: Optional[CutoutConfig] = None, seed: int = 0):
        self.config = config or CutoutConfig()
        self.seed = seed

    def __call__(self, batch: ImageBatch, step: int) -> ImageBatch:
        return cutout(batch, self.config, make_generator(self.seed, "cutout", step))


class GradCamAugmenter:
    """Masks each batch with the Grad-CAM keep-mask of a fixed reference classifier."""

    name = "gradcam"

    def __init__(self, reference: nn.Module):
        self.reference = reference.eval()
        for p in self.reference.parameters():
            p.requires_grad_(False)

    def __call__(self, batch: ImageBatch, step: int) -> ImageBatch:
        return apply_mask(batch, gradcam_mask(self.reference, batch))
