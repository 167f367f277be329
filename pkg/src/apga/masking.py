"""
Binary keep-masks derived from policy probabilities.

A mask value of 1 keeps a pixel and 0 erases it. Thresholds are strict on
both sides, so a pixel with p == 0.5 is erased by the adversarial mask and by
the aiding mask alike.
"""

import enum
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
from PIL import Image

from apga.data import ImageBatch
from apga.errors import InputShapeError

logger = logging.getLogger(__name__)


class MaskMode(str, enum.Enum):
    ADVERSARIAL = "adversarial"
    AIDING = "aiding"


@dataclass(frozen=True)
class MaskBatch:
    values: torch.Tensor  # B x 1 x H x W, exactly 0 or 1, dtype of the policy output
    mode: MaskMode

    @property
    def shape(self):
        return self.values.shape

    def keep_fraction(self) -> float:
        return float(self.values.mean())

    def numpy(self) -> np.ndarray:
        return self.values.detach().cpu().numpy().astype(np.uint8)


def _check_probs(P: torch.Tensor) -> None:
    if P.ndim != 4 or P.shape[1] != 1:
        raise InputShapeError(f"expected B x 1 x H x W probabilities, got {tuple(P.shape)}")


def adversarial_mask(
    P: torch.Tensor, sample: bool = False, generator: Optional[torch.Generator] = None
) -> MaskBatch:
    """
    Keep-mask for the reward pass: keeps p < 0.5, erases predicted-important pixels.

    With `sample=True` each pixel is instead erased with probability p
    (Bernoulli action), which is what the gradient-estimator checks rely on.
    """
    _check_probs(P)
    P = P.detach()
    if sample:
        erase = torch.bernoulli(P, generator=generator)
        return MaskBatch(1.0 - erase, MaskMode.ADVERSARIAL)
    return MaskBatch((P < 0.5).to(P.dtype), MaskMode.ADVERSARIAL)


def aiding_mask(
    P: torch.Tensor, sample: bool = False, generator: Optional[torch.Generator] = None
) -> MaskBatch:
    """Keep-mask for augmentation: keeps p > 0.5."""
    _check_probs(P)
    P = P.detach()
    if sample:
        return MaskBatch(torch.bernoulli(P, generator=generator), MaskMode.AIDING)
    return MaskBatch((P > 0.5).to(P.dtype), MaskMode.AIDING)


def apply_mask(batch: ImageBatch, mask: Union[MaskBatch, torch.Tensor]) -> ImageBatch:
    m = mask.values if isinstance(mask, MaskBatch) else mask
    if m.shape != batch.images.shape:
        raise InputShapeError(
            f"mask shape {tuple(m.shape)} does not match images {tuple(batch.images.shape)}"
        )
    return ImageBatch(batch.images * m.to(batch.images.dtype), batch.labels, batch.ids)


@torch.no_grad()
def predict_masks(policy: torch.nn.Module, images: Union[ImageBatch, torch.Tensor]) -> MaskBatch:
    """Aiding masks of a trained policy, for inference-time augmentation or inspection."""
    x = images.images if isinstance(images, ImageBatch) else images
    return aiding_mask(policy(x))


def export_mask_png(mask: Union[MaskBatch, torch.Tensor, np.ndarray], path: Union[str, Path]) -> Path:
    """
    Write one H x W mask as an 8-bit image (0 -> 0, 1 -> 255). The format
    follows the suffix (.png or .pgm).
    """
    if isinstance(mask, MaskBatch):
        mask = mask.values
    arr = mask.detach().cpu().numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)
    arr = np.squeeze(arr)
    if arr.ndim != 2:
        raise InputShapeError(f"export_mask_png writes one H x W mask, got shape {arr.shape}")
    path = Path(path)
    if path.suffix.lower() not in (".png", ".pgm"):
        raise ValueError(f"mask export supports .png/.pgm, got {path.suffix}")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((arr > 0.5).astype(np.uint8) * 255, mode="L").save(path)
    return path
