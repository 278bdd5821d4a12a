"""Reverse-mode gradients and a decoupled-weight-decay Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn


class DivergenceError(FloatingPointError):
    """A loss or gradient became non-finite."""


def backward(loss: torch.Tensor, model: nn.Module) -> dict[str, torch.Tensor]:
    """Gradient of a scalar ``loss`` with respect to every named parameter.

    Parameters the loss does not depend on get zero gradients.
    """
    if not torch.isfinite(loss).all():
        raise DivergenceError(f"non-finite loss {loss.detach().item()}")
    named = list(model.named_parameters())
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    return {n: torch.zeros_like(p) if g is None else g for (n, p), g in zip(named, grads)}


@dataclass
class AdamState:
    step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)


@torch.no_grad()
def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> dict[str, torch.Tensor]:
    """One AdamW update, applied in place to ``params`` and returned.

    Weight decay is decoupled: ``p *= 1 - lr * weight_decay`` before the
    adaptive step, matching ``torch.optim.AdamW``.
    """
    b1, b2 = betas
    state.step += 1
    t = state.step
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != param shape {tuple(p.shape)} for {name!r}")
        m = state.exp_avg.setdefault(name, torch.zeros_like(p))
        v = state.exp_avg_sq.setdefault(name, torch.zeros_like(p))
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v.sqrt() / math.sqrt(bc2)).add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)
    return params


class AdamW:
    """Stateful wrapper binding :func:`adam_step` to a module's parameters."""

    def __init__(self, model: nn.Module, lr: float, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay: float = 0.0, max_grad_norm: float | None = 1.0):
        self.model = model
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.max_grad_norm = max_grad_norm
        self.state = AdamState()

    def step(self, loss: torch.Tensor, lr_scale: float = 1.0) -> float:
        """Backpropagate ``loss`` and update; returns the pre-clip gradient norm."""
        grads = backward(loss, self.model)
        norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
        if not math.isfinite(norm):
            raise DivergenceError("non-finite gradient norm")
        if self.max_grad_norm and norm > self.max_grad_norm:
            scale = self.max_grad_norm / (norm + 1e-6)
            grads = {n: g * scale for n, g in grads.items()}
        params = dict(self.model.named_parameters())
        adam_step(params, grads, self.state, self.lr * lr_scale, self.betas, self.eps, self.weight_decay)
        return norm


def warmup_constant(step: int, warmup: int) -> float:
    """Learning-rate multiplier: linear ramp over ``warmup`` steps, then 1."""
    if warmup <= 0:
        return 1.0
    return min(1.0, (step + 1) / warmup)
