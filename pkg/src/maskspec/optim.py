"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .tensor import Parameter


@dataclass(frozen=True)
class ScheduleConfig:
    warmup_epochs: float = 40
    total_epochs: float = 80
    peak_lr: float = 1e-3
    floor_lr: float = 0.0

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError(f"warmup ({self.warmup_epochs}) must be shorter than training ({self.total_epochs})")


def lr_at(epoch: float, cfg: ScheduleConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then a half cosine down to ``floor_lr``."""
    if not 0 <= epoch <= cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs}]")
    if epoch < cfg.warmup_epochs:
        return cfg.peak_lr * epoch / cfg.warmup_epochs
    progress = (epoch - cfg.warmup_epochs) / (cfg.total_epochs - cfg.warmup_epochs)
    return cfg.floor_lr + (cfg.peak_lr - cfg.floor_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class AdamW:
    """Adam moments plus ``w <- w - lr * wd * w`` applied before the Adam update.

    ``lr_scale`` optionally maps parameter names to multipliers on the step's
    learning rate (used for layer-wise decay during finetuning).
    """

    def __init__(
        self,
        params: Mapping[str, Parameter] | Iterable[Parameter],
        betas: tuple[float, float] = (0.9, 0.95),
        weight_decay: float = 0.05,
        eps: float = 1e-8,
        lr_scale: Mapping[str, float] | None = None,
    ):
        if not isinstance(params, Mapping):
            params = {p.name: p for p in params}
        self.params = dict(params)
        self.betas = betas
        self.weight_decay = weight_decay
        self.eps = eps
        self.lr_scale = dict(lr_scale or {})
        self.state = OptimizerState(
            m={n: np.zeros_like(p.data) for n, p in self.params.items()},
            v={n: np.zeros_like(p.data) for n, p in self.params.items()},
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr: float) -> None:
        adamw_step(self.params, self.state, lr, self.betas, self.weight_decay, self.eps, self.lr_scale)


def adamw_step(
    params: Mapping[str, Parameter],
    state: OptimizerState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.95),
    weight_decay: float = 0.05,
    eps: float = 1e-8,
    lr_scale: Mapping[str, float] | None = None,
) -> None:
    """One in-place AdamW update of every parameter; gradients are zeroed afterwards."""
    b1, b2 = betas
    state.step += 1
    t = state.step
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        g2 = np.square(g)
        g2 *= 1.0 - b2
        v += g2
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        if step_lr != 0.0:
            w = p.data
            if weight_decay:
                w *= 1.0 - step_lr * weight_decay
            denom = np.sqrt(v, out=g2)
            denom *= 1.0 / math.sqrt(bias2)
            denom += eps
            upd = np.divide(m, denom, out=denom)
            upd *= step_lr / bias1
            w -= upd
        p.zero_grad()
