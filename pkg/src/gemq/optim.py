"""AdamW with decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(param, grad, state: AdamState, key, *, lr, weight_decay=0.0,
               beta1=0.9, beta2=0.999, eps=1e-8):
    """One AdamW update of a single tensor.

    ``state.step`` is the index of the step being taken (1-based) and must be
    advanced by the caller once per optimizer step, not once per tensor.
    """
    m = state.m.get(key)
    v = state.v.get(key)
    if m is None:
        m = np.zeros_like(param)
        v = np.zeros_like(param)
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    state.m[key] = m
    state.v[key] = v
    t = state.step
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return param - lr * (m_hat / (np.sqrt(v_hat) + eps)) - lr * weight_decay * param
