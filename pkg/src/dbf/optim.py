"""Adam with bias correction and a linear-warmup learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from dbf.autodiff import Tensor
from dbf.errors import NonFiniteError


def lr_schedule(step: int, peak_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to ``peak_lr`` at ``warmup_steps``, constant after."""
    if warmup_steps <= 0 or step >= warmup_steps:
        return peak_lr
    return peak_lr * step / warmup_steps


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One in-place update; parameters whose gradient is None are left alone."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
