"""Adam with coupled L2 weight decay, global-norm clipping, step schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0


class Adam:
    """Classic Adam; weight decay is added to the gradient (L2), not decoupled."""

    def __init__(self, params: Sequence[Tensor], lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-4):
        self.params = list(params)
        self.lr = lr
        self.base_lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state = AdamState([np.zeros_like(p.data) for p in self.params],
                               [np.zeros_like(p.data) for p in self.params])

    def step(self, grads=None):
        """Update the parameters in place using ``grads`` (default: ``p.grad``)."""
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
                     for p in self.params]
        if len(grads) != len(self.params):
            raise ShapeError(f"{len(grads)} grads for {len(self.params)} parameters")
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        bc1 = 1.0 - b1 ** st.step
        bc2 = 1.0 - b2 ** st.step
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            if g.shape != p.data.shape:
                raise ShapeError(f"grad shape {g.shape} != parameter shape {p.data.shape}")
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            m_hat = m / bc1
            v_hat = v / bc2
            if self.lr:
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self):
        return self.state.m + self.state.v


def adam_step(params, grads, state: Adam | None = None, **kwargs) -> Adam:
    """Functional convenience: one Adam step, creating the optimizer if needed."""
    opt = state if state is not None else Adam(params, **kwargs)
    opt.step(grads)
    return opt


def global_norm(grads) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads, max_norm=35.0):
    """Scale all grads by ``max_norm / norm`` when the global L2 norm exceeds it.

    Returns ``(grads, norm)`` where ``norm`` is measured before clipping.
    """
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


@dataclass
class StepSchedule:
    """Multiply the learning rate by ``gamma`` at each milestone epoch."""

    milestones: tuple = (9, 12)
    gamma: float = 0.1
    total: int = 12

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] > self.total:
            raise ValueError(f"milestone {ms[-1]} beyond total {self.total}")
        self.milestones = ms

    def factor(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.gamma ** passed

    def lr_at(self, base_lr: float, epoch: int) -> float:
        return base_lr * self.factor(epoch)
