"""AdamW and the cosine learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .nn import Parameter


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if total_steps <= 0:
        return lr0
    step = min(max(step, 0), total_steps)
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


def adamw_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    step: int,
    lr: float,
    weight_decay: float = 1e-5,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> np.ndarray:
    """One AdamW update; ``step`` counts from 1. Returns the new parameter values.

    Weight decay is decoupled: it shrinks the weights directly instead of
    being folded into the gradient.
    """
    b1, b2 = betas
    state.m = b1 * state.m + (1.0 - b1) * grad
    state.v = b2 * state.v + (1.0 - b2) * grad * grad
    m_hat = state.m / (1.0 - b1**step)
    v_hat = state.v / (1.0 - b2**step)
    decayed = param * (1.0 - lr * weight_decay)
    return decayed - lr * m_hat / (np.sqrt(v_hat) + eps)


@dataclass
class AdamW:
    params: list[Parameter]
    lr: float = 1e-4
    weight_decay: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step_count: int = 0
    state: dict[int, AdamState] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        self.step_count += 1
        lr = self.lr if lr is None else lr
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            st = self.state.get(i)
            if st is None:
                st = self.state[i] = AdamState(np.zeros_like(p.data), np.zeros_like(p.data))
            p.data = adamw_step(
                p.data, p.grad, st, self.step_count, lr,
                self.weight_decay, self.betas, self.eps,
            )
