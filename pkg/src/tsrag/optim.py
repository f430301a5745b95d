"""Adam with decoupled weight decay over a dict of numpy tensors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimMismatchError, NumericError


@dataclass
class AdamWState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params: dict, grads: dict, state: AdamWState) -> dict:
    """Apply one AdamW update to ``params`` in place and return it.

    The weight decay shrinks each tensor directly (theta -= lr * wd * theta)
    and never enters the moment estimates.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown tensor {name!r}")
        if params[name].shape != g.shape:
            raise DimMismatchError(f"{name}: grad shape {g.shape} != param shape {params[name].shape}")
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise NumericError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")

    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params
