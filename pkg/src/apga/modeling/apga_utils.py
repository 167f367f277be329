import math
from typing import Optional

import torch
import torch.nn as nn


def fan_in_uniform_(module: nn.Module, generator: Optional[torch.Generator] = None) -> None:
    """
    Re-initialize every conv / linear layer of `module` with
    U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for both weights and biases.
    Layers are visited in registration order, so a given generator seed
    always produces the same parameters.
    """
    with torch.no_grad():
        for m in module.modules():
            if not isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                continue
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = m.out_channels * math.prod(m.kernel_size)
            else:
                fan_in = m.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            m.weight.uniform_(-bound, bound, generator=generator)
            if m.bias is not None:
                m.bias.uniform_(-bound, bound, generator=generator)


class ConvReLU(nn.Sequential):
    def __init__(self, in_c: int, out_c: int):
        super().__init__(nn.Conv2d(in_c, out_c, 3, padding=1), nn.ReLU())


class DoubleConv(nn.Sequential):
    """Two 3x3 conv + ReLU. No normalization, so outputs never depend on batch mates."""

    def __init__(self, in_c: int, out_c: int):
        super().__init__(ConvReLU(in_c, out_c), ConvReLU(out_c, out_c))
