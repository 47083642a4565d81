"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Parameter


@dataclass
class AdamState:
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    step_count: int = 0


def adam_step(
    params: Sequence[Parameter],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1.0e-8,
    weight_decay: float = 1.0e-5,
) -> None:
    """One in-place Adam update of ``params`` from their accumulated ``grad``.

    Weight decay shrinks the value by ``lr * weight_decay`` before the moment
    update is applied and never enters the moments.
    """
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        m = state.first_moment.get(p.name)
        if m is None:
            m = state.first_moment[p.name] = np.zeros_like(p.data)
            state.second_moment[p.name] = np.zeros_like(p.data)
        v = state.second_moment[p.name]
        if m.shape != p.shape:
            raise ContractError(f"moment shape {m.shape} does not match parameter {p.name} {p.shape}")
        g = p.grad
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        if weight_decay:
            p.data -= lr * weight_decay * p.data
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


class Adam:
    def __init__(self, params, lr=0.002, betas=(0.9, 0.999), eps=1.0e-8, weight_decay=1.0e-5):
        if not lr > 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.params, self.state, self.lr, self.betas[0], self.betas[1], self.eps, self.weight_decay)
