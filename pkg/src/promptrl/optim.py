"""Adam-style optimizer with decoupled weight decay, clipping, and lr schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class AdamConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """First/second moment accumulators, one pair per parameter array."""

    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    @classmethod
    def init(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(m=[np.zeros_like(a) for a in arrays],
                   v=[np.zeros_like(a) for a in arrays], step=0)


def adam_update(arrays: list[np.ndarray], grads: list[np.ndarray],
                state: AdamState, config: AdamConfig, lr_now: float) -> None:
    """In-place AdamW step on each array with the given instantaneous lr."""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for arr, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        if config.weight_decay:
            arr -= lr_now * config.weight_decay * arr
        arr -= lr_now * (m / bias1) / (np.sqrt(v / bias2) + config.eps)


def global_norm(grads: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g))) for g in grads))


def clip_by_global_norm(grads: list[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their global norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_norm(grads)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float,
                     warmup_frac: float = 0.05) -> float:
    """Linear warmup over the first warmup_frac of steps, then cosine decay to 0."""
    if total_steps <= 0:
        return base_lr
    warmup_steps = max(1, int(math.ceil(warmup_frac * total_steps)))
    if step < warmup_steps:
        return base_lr * (step + 1) / warmup_steps
    remaining = total_steps - warmup_steps
    if remaining <= 0:
        return base_lr
    progress = (step - warmup_steps) / remaining
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def linear_decay_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Linear decay from base_lr toward zero across total_steps."""
    if total_steps <= 0:
        return base_lr
    return base_lr * (1.0 - step / total_steps)
