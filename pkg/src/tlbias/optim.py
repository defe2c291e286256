"""AdamW with decoupled weight decay, and the one-cycle learning-rate policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Tensor
from .errors import ConfigError, DimensionError, UsageError


@dataclass
class AdamWState:
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float,
               grads: dict[str, np.ndarray] | None = None) -> None:
    """One in-place AdamW update of every tensor in ``params``.

    ``grads`` defaults to each tensor's ``.grad``; a missing gradient counts as
    zero, so decay is still applied. Moments are created lazily, zero-filled.
    """
    b1, b2 = state.betas
    state.t += 1
    t = state.t
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise DimensionError(f"adamw_step: grad for {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        # decoupled decay on the pre-update weights, written as a factor so a
        # zero-gradient parameter shrinks by exactly (1 - lr*wd) per step
        p.data *= p.dtype.type(1.0 - lr * state.weight_decay)
        p.data -= (lr * step).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class OneCycleSchedule:
    total_steps: int
    max_lr: float = 0.005
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if not 0 < self.pct_start < 1:
            raise ConfigError(f"pct_start must lie in (0, 1), got {self.pct_start}")
        if self.total_steps < 2:
            raise ConfigError(f"total_steps must be >= 2, got {self.total_steps}")
        if self.max_lr <= 0 or self.div_factor <= 0 or self.final_div_factor <= 0:
            raise ConfigError("max_lr, div_factor and final_div_factor must be positive")

    @property
    def initial_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.initial_lr / self.final_div_factor

    @property
    def peak_step(self) -> int:
        return min(max(int(round(self.pct_start * self.total_steps)), 1), self.total_steps - 1)


def _cos_interp(start: float, end: float, frac: float) -> float:
    if frac <= 0.0:
        return start
    if frac >= 1.0:
        return end
    return end + (start - end) / 2.0 * (1.0 + math.cos(math.pi * frac))


def one_cycle_lr(step: int, sched: OneCycleSchedule) -> float:
    """Learning rate at ``step`` (0-based).

    Cosine warm-up from ``max_lr/div_factor`` to ``max_lr`` at ``peak_step``,
    then cosine annealing to ``max_lr/(div_factor*final_div_factor)`` at the
    last step.
    """
    if not 0 <= step < sched.total_steps:
        raise UsageError(f"step {step} outside [0, {sched.total_steps})")
    peak = sched.peak_step
    if step <= peak:
        return _cos_interp(sched.initial_lr, sched.max_lr, step / peak)
    return _cos_interp(sched.max_lr, sched.final_lr, (step - peak) / (sched.total_steps - 1 - peak))
