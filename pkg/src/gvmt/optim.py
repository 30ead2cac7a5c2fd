"""RAdam parameter updates and the inverse-square-root learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import NumericError
from .tensor import Tensor


@dataclass
class ScheduleConfig:
    peak_lr: float = 0.001
    warmup_steps: int = 4000

    def __post_init__(self):
        if self.peak_lr <= 0:
            raise ValueError(f"peak_lr must be positive, got {self.peak_lr}")
        if self.warmup_steps < 1:
            raise ValueError(f"warmup_steps must be >= 1, got {self.warmup_steps}")


def lr_at_step(cfg: ScheduleConfig, step: int) -> float:
    """Linear warmup to peak_lr, then inverse-square-root decay."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    w = cfg.warmup_steps
    return cfg.peak_lr * min(step / w, math.sqrt(w / step))


@dataclass
class OptimizerState:
    """Adam moment buffers plus the RAdam rectification switch.

    Buffers are created lazily per parameter name on the first update, so a
    fresh state works for any parameter set; a state loaded from a checkpoint
    must shape-match the parameters it is applied to.
    """

    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    rectified: bool = True


def optimizer_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> None:
    """Apply one in-place update to every parameter that has a gradient.

    Plain bias-corrected Adam when ``state.rectified`` is off.  With
    rectification on, the adaptive denominator is used only once the variance
    estimate is considered reliable (rho_t > 4); before that the update is a
    bias-corrected momentum step, following the RAdam warmup analysis.
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    rho_inf = 2.0 / (1.0 - b2) - 1.0
    rho_t = rho_inf - 2.0 * t * b2**t / bias2

    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")

        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        elif m.shape != p.data.shape:
            raise ValueError(f"moment buffer for {name} has shape {m.shape}, expected {p.data.shape}")

        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v

        m_hat = m / bias1
        if not state.rectified:
            p.data -= lr * m_hat / (np.sqrt(v / bias2) + state.epsilon)
        elif rho_t > 4.0:
            r = math.sqrt(
                ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf)
                / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)
            )
            p.data -= lr * r * m_hat / (np.sqrt(v / bias2) + state.epsilon)
        else:
            p.data -= lr * m_hat
