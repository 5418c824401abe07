from __future__ import annotations

import numpy as np

from ..fusenet.layers import Params


def poly_lr(base: float, step: int, total: int, power: float = 0.9) -> float:
    """base * (1 - step/total)^power, clamped to 0 past the end."""
    frac = min(max(step / total, 0.0), 1.0)
    return base * (1.0 - frac) ** power


class AdamW:
    """Adam with decoupled weight decay (matrices and kernels only)."""

    def __init__(self, params: Params, lr: float, total_steps: int, power: float = 0.9,
                 weight_decay: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.base_lr = lr
        self.total_steps = total_steps
        self.power = power
        self.weight_decay = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.items()}
        self.t = 0

    def lr_at(self, step: int) -> float:
        return poly_lr(self.base_lr, step, self.total_steps, self.power)

    def step(self, step: int) -> float:
        """Apply one update using the current ``.grad`` buffers; returns the lr used."""
        lr = self.lr_at(step)
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r} at step {step}")
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if p.data.ndim >= 2 and self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - lr * update
        return lr
