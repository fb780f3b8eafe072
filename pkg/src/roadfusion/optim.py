"""AdamW with decoupled weight decay, plus the cosine learning-rate schedule."""

from __future__ import annotations

import math
from typing import Iterator, Sequence

import numpy as np

from .nn import Parameter

__all__ = ["AdamW", "cosine_lr", "NonFiniteGradient"]


class NonFiniteGradient(RuntimeError):
    """Raised before any parameter is touched; the whole step is rejected."""

    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}; step rejected")
        self.parameter = name


class AdamW:
    """Decoupled weight decay (applied to parameters, never to the moments),
    bias-corrected first and second moment estimates."""

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.named_params = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self._m = {name: np.zeros_like(p.data) for name, p in self.named_params}
        self._v = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def named_moments(self, kind: str) -> Iterator[tuple[str, np.ndarray]]:
        store = self._m if kind == "m" else self._v
        for name, _ in self.named_params:
            yield name, store[name]

    def zero_grad(self) -> None:
        for _, p in self.named_params:
            p.zero_grad()

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        live = [(name, p) for name, p in self.named_params if p.grad is not None]
        for name, p in live:
            if not np.isfinite(p.grad).all():
                raise NonFiniteGradient(name)
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for name, p in live:
            g = p.grad
            m, v = self._m[name], self._v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * (g * g)
            if self.weight_decay:
                p.data -= lr * self.weight_decay * p.data
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    """Annealed rate: lr0 * (1 + cos(pi * step / total)) / 2."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0
