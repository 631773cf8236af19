"""Adaptive-moment optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError
from . import kernels


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")


def adam_step(params, grads, state: OptimizerState) -> None:
    """One bias-corrected Adam update, in place. ``None`` grads are skipped."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    if len(state.m) != len(params):
        raise ShapeError("optimizer state does not match parameter list")
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.shape or m.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        kernels.adam_update(p.data, g, m, v, state.lr, state.beta1, state.beta2, state.eps, bc1, bc2)


class Adam:
    """Adam over the trainable subset of ``params``.

    Frozen tensors (``requires_grad=False``) are never touched, so a frozen
    model can sit in the same graph as the trained one.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = [p for p in params if p.requires_grad]
        self.state = OptimizerState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)
        self.weight_decay = weight_decay

    @property
    def lr(self):
        return self.state.lr

    @lr.setter
    def lr(self, value):
        if not value > 0:
            raise ConfigError(f"learning rate must be > 0, got {value}")
        self.state.lr = value

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        if self.weight_decay:
            for p in self.params:
                if p.grad is not None and p.ndim >= 2:
                    p.data -= (self.state.lr * self.weight_decay) * p.data
        adam_step(self.params, [p.grad for p in self.params], self.state)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(np.sum([np.sum(g.astype(np.float64) ** 2) for g in grads]))) if grads else 0.0
    if total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.data.dtype)
    return total
