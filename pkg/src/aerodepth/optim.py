"""Adam with coupled L2 weight decay and the linear warmup multiplier."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping

import numpy as np


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}; step aborted")
        self.name = name


@dataclass
class WarmupSchedule:
    base_lr: float = 1e-3
    gamma: float = 0.001
    warmup_iters: int = 1000

    def __post_init__(self):
        if self.warmup_iters < 1:
            raise ValueError(f"warmup_iters must be >= 1, got {self.warmup_iters}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")

    @classmethod
    def for_dataset(cls, length: int, base_lr: float = 1e-3, gamma: float = 0.001) -> "WarmupSchedule":
        # a one-frame dataset would give zero warmup iterations
        return cls(base_lr=base_lr, gamma=gamma, warmup_iters=max(1, min(1000, length - 1)))

    def lr(self, x: int) -> float:
        return self.base_lr * warmup_multiplier(x, self)


def warmup_multiplier(x: int, sched: WarmupSchedule) -> float:
    """1 once ``x`` reaches the warmup length, else gamma * (1 - a) + a with a = x / warmup."""
    if x < 0:
        raise ValueError("iteration index must be >= 0")
    if x >= sched.warmup_iters:
        return 1.0
    alpha = x / sched.warmup_iters
    return sched.gamma * (1.0 - alpha) + alpha


@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping) -> "AdamState":
        m = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        v = {k: np.zeros_like(_arr(p)) for k, p in params.items()}
        return cls(m=m, v=v, t=0)


def _arr(p) -> np.ndarray:
    # ndarrays also have a .data attribute (a memoryview), so test the type
    return p if isinstance(p, np.ndarray) else p.data


def adam_step(params: Mapping, grads: Mapping[str, np.ndarray], state: AdamState, lr_t: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0005) -> AdamState:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    Weight decay is coupled: ``weight_decay * param`` is added to the gradient
    before the moment updates. Every gradient is checked before anything is
    modified, so a non-finite gradient leaves parameters and state untouched.
    """
    if lr_t <= 0:
        raise ValueError("lr_t must be positive")
    for name in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != _arr(params[name]).shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape for {name!r}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        w = _arr(p)
        if g is None:
            g = np.zeros_like(w)
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        dt = w.dtype.type
        g = g.astype(w.dtype, copy=False)
        if weight_decay:
            g = g + dt(weight_decay) * w
        m = state.m[name]
        v = state.v[name]
        m *= dt(beta1)
        m += dt(1.0 - beta1) * g
        v *= dt(beta2)
        v += dt(1.0 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        w -= dt(lr_t) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return state


def l2_penalty(params: Mapping, weight_decay: float = 0.0005) -> float:
    """Loss-term equivalent of coupled decay: 0.5 * wd * sum of squared weights."""
    total = 0.0
    for p in params.values():
        w = _arr(p).astype(np.float64)
        total += float(np.sum(w * w))
    return 0.5 * weight_decay * total
