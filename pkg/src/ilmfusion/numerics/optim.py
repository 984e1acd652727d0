"""Adam with bias correction and an inverse-square-root warmup schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup to ``peak_lr`` then decay proportional to 1/sqrt(step)."""

    peak_lr: float = 1e-3
    warmup_steps: int = 400

    def rate(self, step: int) -> float:
        if step < 1:
            raise ValueError("schedule steps are 1-based")
        if self.warmup_steps <= 0:
            return self.peak_lr
        return self.peak_lr * min(step / self.warmup_steps, math.sqrt(self.warmup_steps / step))


@dataclass(frozen=True)
class AdamConfig:
    betas: tuple[float, float] = (0.9, 0.98)
    eps: float = 1e-9
    clip_norm: float | None = None


@dataclass
class AdamState:
    schedule: LrSchedule = field(default_factory=LrSchedule)
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


def global_grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
    config: AdamConfig = AdamConfig(),
) -> float:
    """Apply one Adam update in place and return the learning rate used.

    Parameters whose gradient is ``None`` still advance their moments with a
    zero gradient, matching a dense optimiser.  Each updated tensor gets a
    fresh data array, so earlier snapshots of ``.data`` stay valid.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
    state.step_count += 1
    t = state.step_count
    lr = state.schedule.rate(t)
    beta1, beta2 = config.betas
    clip = 1.0
    if config.clip_norm is not None:
        norm = global_grad_norm({k: v for k, v in grads.items() if v is not None})
        if norm > config.clip_norm:
            clip = config.clip_norm / norm
    correction1 = 1.0 - beta1**t
    correction2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else g * clip
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + config.eps)
    return lr
