"""Reverse-mode vs central-difference gradient comparison."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np
import torch

Shape = Sequence[int]


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def summary(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.errors.items())]
        lines.append(f"max relative error {self.max_error:.3e} ({'ok' if self.passed else 'FAIL'} at {self.tolerance:g})")
        return "\n".join(lines)


def _outputs(result) -> list[torch.Tensor]:
    if isinstance(result, torch.Tensor):
        return [result]
    out = []
    for r in result:
        out.extend(_outputs(r))
    return out


def _rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = float(np.linalg.norm(analytic - numeric))
    scale = max(float(np.linalg.norm(analytic)), float(np.linalg.norm(numeric)))
    return diff / scale if scale > 1e-10 else diff


def grad_check(
    module: Optional[torch.nn.Module],
    inputs: Sequence[Union[torch.Tensor, Shape]],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    fn: Optional[Callable] = None,
    max_entries: int = 8,
    seed: int = 0,
    check_inputs: bool = True,
) -> GradCheckReport:
    """Compare autograd gradients of a random linear functional of the outputs
    against central differences, in float64.

    ``inputs`` may mix tensors and shapes; shapes become seeded standard-normal
    tensors. ``fn(module, *inputs)`` overrides the call when the module needs
    extra non-tensor arguments. Up to ``max_entries`` entries per tensor are
    probed. The functional's weights are multiples of 1/8 so exactly linear
    maps can check to zero error.
    """
    gen = torch.Generator().manual_seed(seed)
    module = copy.deepcopy(module).double() if module is not None else None
    xs = []
    for x in inputs:
        if isinstance(x, torch.Tensor):
            xs.append(x.detach().clone().double())
        else:
            xs.append(torch.randn(tuple(x), generator=gen, dtype=torch.float64))
    call = fn or (lambda m, *a: m(*a))

    def run():
        return _outputs(call(module, *xs))

    with torch.no_grad():
        weights = [torch.randint(-16, 17, o.shape, generator=gen).double() / 8.0 for o in run()]

    def loss():
        return sum((o * w).sum() for o, w in zip(run(), weights))

    named = []
    if module is not None:
        named += [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    if check_inputs:
        named += [(f"input:{i}", x) for i, x in enumerate(xs) if x.is_floating_point()]
    for _, t in named:
        t.requires_grad_(True)
        t.grad = None
    loss().backward()

    report = GradCheckReport(tolerance=tolerance)
    rng = np.random.default_rng(seed)
    for name, t in named:
        grad = t.grad if t.grad is not None else torch.zeros_like(t)
        flat_grad = grad.reshape(-1)
        n = t.numel()
        picks = np.arange(n) if n <= max_entries else rng.choice(n, size=max_entries, replace=False)
        analytic, numeric = [], []
        with torch.no_grad():
            flat = t.view(-1)
            for i in picks:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                down = loss().item()
                flat[i] = orig
                numeric.append((up - down) / (2 * h))
                analytic.append(flat_grad[i].item())
        report.errors[name] = _rel_error(np.array(analytic), np.array(numeric))
    return report
