"""Adam optimizer and mean-squared-error loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class OptimizerError(FloatingPointError):
    pass


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(state: AdamState, params, grads):
    """Apply one bias-corrected Adam update in place to ``params``."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise OptimizerError(f"non-finite gradient at step {state.step + 1}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


def mse(pred, target, weight=None):
    """Mean squared error and its gradient w.r.t. ``pred``.

    With ``weight`` each squared error is scaled elementwise before averaging.
    """
    diff = pred - target
    n = diff.size
    if weight is None:
        return float(np.mean(diff * diff)), 2.0 * diff / n
    wd = weight * diff
    return float(np.sum(wd * diff) / n), 2.0 * wd / n
