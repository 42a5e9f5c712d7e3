"""Adam with bias correction and decoupled weight decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    """Per-parameter first/second moment estimates plus step counter.

    Weight decay, when nonzero, is decoupled: each step shrinks the
    parameter by lr * weight_decay * param before the Adam delta is applied,
    so a zero gradient still decays the weights.
    """

    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """Apply one Adam update in place; returns the same params dict."""
    if set(grads) - set(params):
        missing = sorted(set(grads) - set(params))
        raise KeyError(f"gradients for unknown parameters: {missing}")
    state.t += 1
    t = state.t
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        if state.weight_decay > 0.0:
            p -= state.lr * state.weight_decay * p
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params
