"""
Functional entry points over the reference networks: forward passes,
gradient extraction and Adam updates on named parameter sets.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Tuple, Union

import numpy as np
import torch
import torch.nn as nn

from apga.errors import NumericError, UsageError

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def _images(batch) -> torch.Tensor:
    return batch.images if hasattr(batch, "images") else batch


def forward_classifier(model: nn.Module, batch) -> torch.Tensor:
    """B x 1 x H x W images (or an ImageBatch) -> B x K logits."""
    return model(_images(batch))


def forward_policy(model: nn.Module, batch) -> torch.Tensor:
    """B x 1 x H x W images (or an ImageBatch) -> B x 1 x H x W probabilities in (0, 1)."""
    return model(_images(batch))


def named_params(model: nn.Module) -> Dict[str, nn.Parameter]:
    return dict(model.named_parameters())


def backward(
    loss: torch.Tensor,
    params: Mapping[str, torch.Tensor],
    retain_graph: bool = False,
) -> Dict[str, torch.Tensor]:
    """
    Gradient of a scalar `loss` w.r.t. each named parameter. Parameters the
    loss does not reach get zeros of the same shape.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise UsageError("backward() needs a loss produced by a recorded forward pass")
    if loss.numel() != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {tuple(loss.shape)}")
    names = list(params)
    grads = torch.autograd.grad(
        loss, [params[n] for n in names], allow_unused=True, retain_graph=retain_graph
    )
    out = {}
    for name, p, g in zip(names, params.values(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'", name=name)
        out[name] = g
    return out


@dataclass
class AdamState:
    """Adam moments for one parameter set, plus the number of updates applied."""

    optimizer: torch.optim.Adam
    names: Tuple[str, ...]
    lr: float
    betas: Tuple[float, float] = ADAM_BETAS
    eps: float = ADAM_EPS
    step: int = 0
    _params: Dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    @classmethod
    def create(cls, params: Mapping[str, torch.Tensor], lr: float, betas=ADAM_BETAS, eps=ADAM_EPS):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        opt = torch.optim.Adam(list(params.values()), lr=lr, betas=tuple(betas), eps=eps)
        return cls(opt, tuple(params), lr, tuple(betas), eps, 0, dict(params))

    def moments(self, name: str) -> Tuple[torch.Tensor, torch.Tensor]:
        st = self.optimizer.state.get(self._params[name], {})
        p = self._params[name]
        return (
            st.get("exp_avg", torch.zeros_like(p)),
            st.get("exp_avg_sq", torch.zeros_like(p)),
        )

    def tensors(self, prefix: str) -> Dict[str, torch.Tensor]:
        out = {f"{prefix}.step": torch.tensor([self.step], dtype=torch.int64)}
        for name in self.names:
            st = self.optimizer.state.get(self._params[name])
            if not st:
                continue
            for key in ("step", "exp_avg", "exp_avg_sq"):
                out[f"{prefix}.{name}.{key}"] = st[key].detach().clone()
        return out

    def load_tensors(self, tensors: Mapping[str, np.ndarray], prefix: str) -> None:
        self.step = int(tensors[f"{prefix}.step"][0])
        self.optimizer.state.clear()
        for name in self.names:
            key = f"{prefix}.{name}.exp_avg"
            if key not in tensors:
                continue
            p = self._params[name]
            self.optimizer.state[p] = {
                "step": torch.from_numpy(np.array(tensors[f"{prefix}.{name}.step"])),
                "exp_avg": torch.from_numpy(np.array(tensors[key])).to(p.dtype),
                "exp_avg_sq": torch.from_numpy(np.array(tensors[f"{prefix}.{name}.exp_avg_sq"])).to(p.dtype),
            }


def adam_step(
    params: Mapping[str, torch.Tensor],
    grads: Mapping[str, torch.Tensor],
    state: AdamState,
) -> Tuple[Mapping[str, torch.Tensor], AdamState]:
    """Apply one bias-corrected Adam update in place. Returns (params, state)."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for '{name}' has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter '{name}'", name=name)
    for name, p in params.items():
        p.grad = grads[name].detach().to(p.dtype).clone()
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.step += 1
    return params, state
