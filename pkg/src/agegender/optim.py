"""NovoGrad with layer-wise second moments, plus the warmup/cosine schedule."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
from torch.optim.optimizer import Optimizer


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 0.001
    weight_decay: float = 0.001
    beta1: float = 0.95
    beta2: float = 0.5
    eps: float = 1e-8
    warmup_steps: int = 10000
    batch_size: int = 16

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def lr_at(step: int, peak_lr: float, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``peak_lr``, then half-cosine down to 0 at
    ``total_steps`` (and 0 beyond)."""
    if total_steps <= warmup_steps:
        raise ValueError(f"total steps ({total_steps}) must exceed warmup steps ({warmup_steps})")
    if step < 0:
        raise ValueError("step must be non-negative")
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def _update(w: torch.Tensor, g: torch.Tensor, state: dict, beta1: float, beta2: float,
            eps: float, weight_decay: float, lr: float) -> None:
    g_sq = torch.sum(g * g)
    if "v" not in state:
        state["v"] = g_sq.clone()
        state["m"] = torch.zeros_like(w)
    else:
        state["v"].mul_(beta2).add_((1.0 - beta2) * g_sq)
    direction = g / (torch.sqrt(state["v"]) + eps)
    if weight_decay:
        direction = direction + weight_decay * w
    state["m"].mul_(beta1).add_(direction)
    w.sub_(lr * state["m"])


def novograd_step(params: dict, grads: dict, state: dict, config: OptimizerConfig, lr_t: float) -> None:
    """Functional NovoGrad step over named tensors; updates ``params`` and
    ``state`` in place. ``state`` maps name -> per-layer slot dict."""
    if set(grads) - set(params):
        raise KeyError(f"gradients for unknown parameters {sorted(set(grads) - set(params))}")
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {tuple(g.shape)} != parameter shape {tuple(w.shape)}")
        with torch.no_grad():
            _update(w, g, state.setdefault(name, {}), config.beta1, config.beta2,
                    config.eps, config.weight_decay, lr_t)


class NovoGrad(Optimizer):
    """One second-moment slot per parameter tensor; no bias correction."""

    def __init__(self, params, lr=1e-3, betas=(0.95, 0.5), eps=1e-8, weight_decay=0.0):
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ValueError(f"invalid betas {betas}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                _update(p, p.grad, self.state[p], beta1, beta2, group["eps"],
                        group["weight_decay"], group["lr"])
        return loss
