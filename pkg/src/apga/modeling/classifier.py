from typing import List, Sequence

import torch
import torch.nn as nn

from apga.errors import InputShapeError
from apga.modeling.apga_utils import ConvReLU, fan_in_uniform_


class ReferenceClassifier(nn.Module):
    """
    Desk-scale classification network M_c.

        [conv3x3(c0) + ReLU + maxpool] x2 -> conv3x3(c2) + ReLU
        -> global average pool -> dense(num_classes)

    `features` returns the final conv activation (the Grad-CAM tap) and
    `head` maps it to logits, so forward(x) == head(features(x)).
    """

    def __init__(
        self,
        in_chans: int = 1,
        num_classes: int = 2,
        channels: Sequence[int] = (16, 16, 32),
        seed: int = 0,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        c0, c1, c2 = channels
        self.in_chans = in_chans
        self.num_classes = num_classes
        self.block1 = nn.Sequential(ConvReLU(in_chans, c0), nn.MaxPool2d(2))
        self.block2 = nn.Sequential(ConvReLU(c0, c1), nn.MaxPool2d(2))
        self.block3 = ConvReLU(c1, c2)
        self.fc = nn.Linear(c2, num_classes)

        g = torch.Generator().manual_seed(seed)
        fan_in_uniform_(self, generator=g)

    @property
    def layers(self) -> List[str]:
        return [
            f"conv3x3({self.block1[0][0].out_channels})+relu+maxpool",
            f"conv3x3({self.block2[0][0].out_channels})+relu+maxpool",
            f"conv3x3({self.block3[0].out_channels})+relu",
            "global_avg_pool",
            f"dense({self.num_classes})",
        ]

    def check_input(self, x: torch.Tensor) -> None:
        if x.ndim != 4 or x.shape[1] != self.in_chans:
            raise InputShapeError(
                f"classifier expects Bx{self.in_chans}xHxW input, got {tuple(x.shape)}"
            )
        if x.shape[-2] < 4 or x.shape[-1] < 4:
            raise InputShapeError(f"spatial size must be >= 4x4, got {tuple(x.shape[-2:])}")

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.block3(self.block2(self.block1(x)))

    def head(self, feats: torch.Tensor) -> torch.Tensor:
        return self.fc(feats.mean(dim=(2, 3)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        self.check_input(x)
        return self.head(self.features(x))
