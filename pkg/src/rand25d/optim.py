"""Adam with bias correction."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Update ``params`` in place and return the advanced state."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    bc1 = 1 - beta1 ** state.t
    bc2 = 1 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"parameter {p.shape} and gradient {g.shape} differ")
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p -= step.astype(p.dtype, copy=False)
    return state


class Adam:
    def __init__(self, params: list[Tensor], lr: float = 1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state, self.lr)
