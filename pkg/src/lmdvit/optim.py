"""AdamW with decoupled weight decay and a stepped cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0


def adamw_step(params, grads, state, lr, betas=(0.9, 0.999), weight_decay=0.0, eps=1e-8):
    """One in-place AdamW update of ``params`` (list of arrays).

    ``state`` is a list of AdamWState aligned with ``params``; a ``None`` grad
    is treated as zero so weight decay still applies.
    """
    b1, b2 = betas
    for p, g, st in zip(params, grads, state):
        if g is None:
            g = np.zeros_like(p)
        st.step += 1
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        st.m *= b1
        st.m += (1.0 - b1) * g
        st.v *= b2
        st.v += (1.0 - b2) * g * g
        mhat = st.m / (1.0 - b1 ** st.step)
        vhat = st.v / (1.0 - b2 ** st.step)
        p -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class AdamW:
    """Optimizer over a list of parameter Tensors."""

    params: list
    lr: float = 2e-4
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.02
    eps: float = 1e-8
    state: list = field(init=False)

    def __post_init__(self):
        self.state = [AdamWState(np.zeros_like(p.data), np.zeros_like(p.data)) for p in self.params]

    def step(self, lr: float | None = None) -> None:
        adamw_step([p.data for p in self.params], [p.grad for p in self.params], self.state,
                   self.lr if lr is None else lr, self.betas, self.weight_decay, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float = 1e-6,
              update_every: int = 1) -> float:
    """Cosine annealing from ``base_lr`` to ``min_lr``, held constant between updates."""
    if total_steps <= 0:
        return base_lr
    t = (step // max(update_every, 1)) * max(update_every, 1)
    t = min(t, total_steps)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * t / total_steps))
