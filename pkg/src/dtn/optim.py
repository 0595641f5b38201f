"""Adam with decoupled weight decay, plus the step learning-rate schedule."""

from __future__ import annotations

from typing import Iterable

import numpy as np

from .errors import ContractError
from .tensor import Tensor


class Adam:
    """Adam optimizer with bias correction and decoupled weight decay.

    Args:
        params: tensors to optimize (a dict's values or any iterable).
        lr: learning rate.
        weight_decay: decoupled decay coefficient, applied as ``p *= 1 - lr * wd``.
        betas: moment decay rates.
        eps: denominator guard.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-4,
        weight_decay: float = 1e-4,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.betas = betas
        self.eps = eps
        self.step_count = 0
        self.exp_avg = [np.zeros_like(p.data) for p in self.params]
        self.exp_avg_sq = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        missing = [p.name or f"#{i}" for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"no gradient for parameters: {', '.join(missing[:5])}")
        beta1, beta2 = self.betas
        self.step_count += 1
        bc1 = 1.0 - beta1 ** self.step_count
        bc2 = 1.0 - beta2 ** self.step_count
        for p, m, v in zip(self.params, self.exp_avg, self.exp_avg_sq):
            g = p.grad
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p.data -= (self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)).astype(p.dtype)
            p.grad = None


def step_lr(base_lr: float, epoch: int, step_size: int = 15, gamma: float = 0.1) -> float:
    """Learning rate for a 0-based ``epoch``: divided by 10 every ``step_size`` epochs."""
    return base_lr * gamma ** (epoch // step_size)
