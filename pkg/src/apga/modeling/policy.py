from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from apga.errors import InputShapeError
from apga.modeling.apga_utils import DoubleConv, fan_in_uniform_


class MaskPolicy(nn.Module):
    """
    Segmentation policy M_p: a 2-level encoder-decoder with a skip connection.

    in -> enc1 (c0) ----------------------- concat -> dec (c0) -> 1x1 -> sigmoid
             \\-> maxpool -> enc2 (c1) -> upsample /

    Output is the per-pixel probability p_k that a pixel is useful, B x 1 x H x W.
    """

    def __init__(self, in_chans: int = 1, channels: Sequence[int] = (16, 32), seed: int = 0):
        super().__init__()
        c0, c1 = channels
        self.in_chans = in_chans
        self.enc1 = DoubleConv(in_chans, c0)
        self.pool = nn.MaxPool2d(2)
        self.enc2 = DoubleConv(c0, c1)
        self.dec = DoubleConv(c0 + c1, c0)
        self.out = nn.Conv2d(c0, 1, kernel_size=1)

        g = torch.Generator().manual_seed(seed)
        fan_in_uniform_(self, generator=g)

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_chans:
            raise InputShapeError(
                f"policy expects Bx{self.in_chans}xHxW input, got {tuple(x.shape)}"
            )
        if x.shape[-2] < 2 or x.shape[-1] < 2:
            raise InputShapeError(f"spatial size must be >= 2x2, got {tuple(x.shape[-2:])}")

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        skip = self.enc1(x)
        deep = self.enc2(self.pool(skip))
        # interpolate to the skip size so odd H/W line up
        deep = F.interpolate(deep, size=skip.shape[-2:], mode="bilinear", align_corners=False)
        return self.out(self.dec(torch.cat([skip, deep], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        eps = torch.finfo(x.dtype).eps
        # sigmoid saturates to exactly 1.0 in fp32 for logits > ~17
        return torch.sigmoid(self.logits(x)).clamp(eps, 1.0 - eps)
