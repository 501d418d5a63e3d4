"""AdamW with decoupled weight decay and a linear-warmup learning rate."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError


@dataclass(frozen=True)
class LRSchedule:
    total_steps: int
    peak_lr: float = 5e-5
    warmup_fraction: float = 0.10

    @property
    def warmup_steps(self) -> int:
        return max(1, int(round(self.warmup_fraction * self.total_steps)))

    def lr(self, step: int) -> float:
        """Linear ramp from 0 to the peak over the warmup steps, then constant."""
        if step <= self.warmup_steps:
            return self.peak_lr * step / self.warmup_steps
        return self.peak_lr


@dataclass
class AdamW:
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-2
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, lr: float, names=None):
        """Update ``params`` in place. Only ``names`` (default: every key of
        ``grads``) are touched."""
        names = list(grads) if names is None else list(names)
        for name in names:
            if not np.isfinite(grads[name]).all():
                raise DivergenceError(f"non-finite gradient for {name}", step=self.step_count + 1)
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name in names:
            p, g = params[name], grads[name]
            if p.shape != g.shape:
                raise ValueError(f"gradient shape {g.shape} does not match {name} {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p *= 1.0 - lr * self.weight_decay
            p -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return math.ceil(n_samples / batch_size)
