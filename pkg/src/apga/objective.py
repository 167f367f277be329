"""Losses, the adversarial reward and its moving-average baseline."""

import math
from dataclasses import dataclass, replace
from typing import Union

import torch
import torch.nn.functional as F

from apga.errors import ConfigError, InputShapeError, NumericError
from apga.masking import MaskBatch

BCE_EPS = 1e-7

Scalar = Union[float, torch.Tensor]


def bce(pred: torch.Tensor, target: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    """Mean binary cross-entropy; `pred` is clamped to [eps, 1 - eps] first."""
    if pred.shape != target.shape:
        raise InputShapeError(f"bce shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.clamp(eps, 1.0 - eps)
    y = target.to(p.dtype)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


def class_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean softmax cross-entropy of B x K logits against class indices."""
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise InputShapeError(f"expected B x K logits with K >= 2, got {tuple(logits.shape)}")
    if labels.shape != (logits.shape[0],):
        raise InputShapeError(f"expected {logits.shape[0]} labels, got {tuple(labels.shape)}")
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= logits.shape[1]):
        raise ValueError(f"labels must lie in [0, {logits.shape[1]}), got {labels.tolist()}")
    return F.cross_entropy(logits, labels.long())


def _item(v: Scalar) -> float:
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


def adversarial_reward(L_adversarial: Scalar, L_original: Scalar) -> float:
    """Loss increase caused by erasing the pixels the policy marked important."""
    return _item(L_adversarial) - _item(L_original)


@dataclass(frozen=True)
class RewardBaseline:
    decay: float = 0.5
    value: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError(f"baseline decay must be in [0, 1), got {self.decay}")


def update_baseline(state: RewardBaseline, R_t: Scalar) -> RewardBaseline:
    r = _item(R_t)
    if not math.isfinite(r):
        raise NumericError(f"non-finite reward {r}", name="R_t")
    if not state.initialized:
        return replace(state, value=r, initialized=True)
    return replace(state, value=state.decay * state.value + (1.0 - state.decay) * r)


@dataclass
class PolicyLossTerms:
    L_prob: torch.Tensor
    L_extreme: torch.Tensor
    R_t: float
    b_t: float
    lambda_zeros: float
    total: torch.Tensor

    def recompute_total(self) -> torch.Tensor:
        return self.L_prob * (self.R_t - self.b_t) + self.L_extreme * self.lambda_zeros


def policy_loss(
    P: torch.Tensor,
    A_adv,
    R_t: Scalar,
    b_t: Scalar,
    lambda_zeros: float,
) -> PolicyLossTerms:
    """
    total = bce(P, A_adv) * (R_t - b_t) + bce(P, 0) * lambda_zeros

    The second term penalizes marking every pixel important (whose erasure
    would blank the whole image). Gradients reach P only.
    """
    if lambda_zeros < 0:
        raise ConfigError(f"lambda_zeros must be >= 0, got {lambda_zeros}")
    target = A_adv.values if isinstance(A_adv, MaskBatch) else A_adv
    target = target.detach()
    R, b = _item(R_t), _item(b_t)
    L_prob = bce(P, target)
    L_extreme = bce(P, torch.zeros_like(P))
    total = L_prob * (R - b) + L_extreme * lambda_zeros
    if not torch.isfinite(total):
        raise NumericError(f"non-finite policy loss {float(total)}", name="policy_loss")
    return PolicyLossTerms(L_prob, L_extreme, R, b, float(lambda_zeros), total)
