"""AdamW with decoupled weight decay and a step learning-rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class ParamGroup:
    params: list
    lr: float
    weight_decay: float = 1e-4


@dataclass
class OptimizerState:
    step: int = 0
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)


class AdamW:
    """Adam whose weight decay shrinks the parameter directly.

    The update for parameter ``p`` with gradient ``g`` is::

        p <- p * (1 - lr * wd)
        p <- p - lr * m_hat / (sqrt(v_hat) + eps)

    so the decay never passes through the adaptive moment estimates.
    """

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        if not isinstance(groups, (list, tuple)) or not groups or not isinstance(groups[0], ParamGroup):
            raise ContractError("AdamW expects a non-empty list of ParamGroup")
        self.groups = list(groups)
        self.betas = betas
        self.eps = eps
        self.state = OptimizerState()
        for group in self.groups:
            for p in group.params:
                self.state.exp_avg[id(p)] = np.zeros_like(p.data)
                self.state.exp_avg_sq[id(p)] = np.zeros_like(p.data)

    def zero_grad(self):
        for group in self.groups:
            for p in group.params:
                p.grad = None

    def set_lr_scale(self, base_lrs, factor):
        for group, base in zip(self.groups, base_lrs):
            group.lr = base * factor

    def step(self):
        for group in self.groups:
            for p in group.params:
                if p.grad is None:
                    raise ContractError(f"parameter of shape {p.shape} has no gradient")
        self.state.step += 1
        t = self.state.step
        b1, b2 = self.betas
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for group in self.groups:
            lr, wd = group.lr, group.weight_decay
            for p in group.params:
                g = p.grad
                m = self.state.exp_avg[id(p)]
                v = self.state.exp_avg_sq[id(p)]
                m *= b1
                m += (1.0 - b1) * g
                v *= b2
                v += (1.0 - b2) * g * g
                if wd:
                    p.data *= 1.0 - lr * wd
                denom = np.sqrt(v / bc2) + self.eps
                p.data -= lr * (m / bc1) / denom


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params if p.grad is not None)))
    if max_norm and total > max_norm:
        s = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= s
    return total


def step_lr_factor(epoch, drop_epoch, drop_factor):
    """Multiplier for ``epoch`` (0-based) under a single step drop."""
    if drop_epoch is not None and drop_epoch >= 0 and epoch >= drop_epoch:
        return 1.0 / drop_factor
    return 1.0
