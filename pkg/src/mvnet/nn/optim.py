"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import torch

DEFAULT_LR = 1e-3
DEFAULT_WEIGHT_DECAY = 1e-4


@dataclass
class OptimizerState:
    lr: float = DEFAULT_LR
    weight_decay: float = DEFAULT_WEIGHT_DECAY
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adamw_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, Optional[torch.Tensor]],
    state: OptimizerState,
) -> OptimizerState:
    """One in-place AdamW update.

    Parameters with ``requires_grad`` False are frozen and never touched. A
    missing gradient is treated as zero so moments still advance.
    """
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1 - b1 ** state.step
    bc2 = 1 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        elif g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {tuple(g.shape)}, parameter {tuple(p.shape)}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        p.mul_(1 - state.lr * state.weight_decay)
        denom = (v / bc2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / bc1)
    return state


class AdamW:
    """Optimizer object over a module's named parameters, driving :func:`adamw_step`."""

    def __init__(self, named_params: Iterable[tuple[str, torch.nn.Parameter]], lr=DEFAULT_LR,
                 weight_decay=DEFAULT_WEIGHT_DECAY, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(named_params)
        self.state = OptimizerState(lr=lr, weight_decay=weight_decay, betas=tuple(betas), eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        adamw_step(self.params, {n: p.grad for n, p in self.params.items()}, self.state)
