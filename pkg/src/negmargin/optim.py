"""Adam with weight decay and a cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError


@dataclass(frozen=True)
class OptimConfig:
    total_steps: int
    lr0: float = 3e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    # False switches to classic L2 (decay folded into the gradient).
    decoupled: bool = True

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ContractError(f"lr0 must be > 0, got {self.lr0}")
        if self.total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {self.weight_decay}")


def lr_at(t: int, cfg: OptimConfig) -> float:
    """Cosine-decayed learning rate at optimizer step ``t`` of ``total_steps``."""
    if not 0 <= t <= cfg.total_steps:
        raise ContractError(f"step {t} outside [0, {cfg.total_steps}]")
    return cfg.lr0 * 0.5 * (1.0 + math.cos(math.pi * t / cfg.total_steps))


@dataclass
class Adam:
    cfg: OptimConfig
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> float:
        """Update ``params`` in place, zero ``grads``, return the lr used."""
        for name, g in grads.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r} at step {self.t}")
        lr = lr_at(self.t, self.cfg)
        b1, b2 = self.cfg.betas
        lam = self.cfg.weight_decay
        k = self.t + 1
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name!r}")
            if not self.cfg.decoupled and lam:
                g = g + lam * p
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / (1.0 - b1 ** k)
            v_hat = v / (1.0 - b2 ** k)
            if self.cfg.decoupled and lam:
                p -= lr * lam * p
            p -= lr * m_hat / (np.sqrt(v_hat) + self.cfg.eps)
        for g in grads.values():
            g.fill(0.0)
        self.t = k
        return lr
