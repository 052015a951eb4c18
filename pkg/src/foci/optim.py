"""AdamW with decoupled weight decay, and the warmup + cosine schedule."""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .engine import Tensor


class FrozenModelError(RuntimeError):
    """Raised when an optimizer is pointed at frozen parameters."""


class AdamW:
    """Adam with decoupled weight decay over a name -> Tensor mapping.

    Parameters whose name is in ``no_decay`` skip weight decay.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        lr: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        no_decay: frozenset[str] | set[str] = frozenset(),
    ):
        self.params = dict(params)
        frozen = sorted(k for k, p in self.params.items() if not p.requires_grad)
        if frozen:
            raise FrozenModelError(f"parameters are frozen and cannot be optimized: {frozen[:3]}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.no_decay = set(no_decay)
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, scale: float = 1.0) -> None:
        """Apply one update; gradients are multiplied by ``scale`` first."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad * scale
            if self.weight_decay and k not in self.no_decay:
                p.data = p.data - self.lr * self.weight_decay * p.data
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def warmup_cosine(epoch: int, epochs: int, warmup: int, lr_max: float, lr_min: float) -> float:
    """Per-epoch learning rate: linear warmup then cosine from lr_max to lr_min."""
    if warmup > epochs:
        raise ValueError("warmup epochs exceed total epochs")
    if epoch < warmup:
        return lr_max * (epoch + 1) / warmup
    span = max(1, epochs - warmup - 1)
    progress = min(1.0, (epoch - warmup) / span)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
