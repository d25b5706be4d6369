"""AdamW and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .autodiff import Tensor


def warmup_cosine_lr(step: int, total_steps: int, peak_lr: float, warmup_ratio: float = 0.03) -> float:
    """Linear warmup from 0 to ``peak_lr`` then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    warmup = math.ceil(warmup_ratio * total_steps)
    if warmup > 0 and step < warmup:
        return peak_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = min(max(step - warmup, 0) / span, 1.0)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay.

    ``weight_decay`` may be a float applied to every parameter or a
    sequence giving one value per parameter. Gradients are read and then
    cleared by :meth:`step`.
    """

    def __init__(self, params: Sequence[Tensor], lr: float = 5e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay=0.0):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise ValueError("AdamW given a parameter that does not require grad")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        if isinstance(weight_decay, (int, float)):
            weight_decay = [float(weight_decay)] * len(self.params)
        self.weight_decay = list(weight_decay)
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def grad_norm(self) -> float:
        return float(math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in self.params)))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            factor = max_norm / (norm + 1e-12)
            for p in self.params:
                p.grad *= p.grad.dtype.type(factor)
        return norm

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for p, m, v, wd in zip(self.params, self.m, self.v, self.weight_decay):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if wd:
                update = update + wd * p.data
            p.data -= (lr * update).astype(p.data.dtype, copy=False)
            g[...] = 0

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"t": np.asarray(self.t, dtype=np.int64)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out
