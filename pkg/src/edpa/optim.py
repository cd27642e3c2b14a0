"""Adam with bias correction, operating on dicts of named numpy arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from edpa.errors import DivergenceError, ShapeError


@dataclass
class AdamState:
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float):
    """One bias-corrected Adam update. Returns new (params, state); inputs are not mutated.

    Parameters without an entry in ``grads`` are left untouched.
    """
    for name, g in grads.items():
        if name not in params:
            raise ShapeError(f"adam_step: gradient for unknown parameter {name!r}")
        if np.shape(g) != np.shape(params[name]):
            raise ShapeError(f"adam_step: {name} grad shape {np.shape(g)} != param shape {np.shape(params[name])}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"adam_step: non-finite gradient for {name!r} at step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params = dict(params)
    first = dict(state.first)
    second = dict(state.second)
    for name, g in grads.items():
        m = b1 * first.get(name, np.zeros_like(g)) + (1 - b1) * g
        v = b2 * second.get(name, np.zeros_like(g)) + (1 - b2) * g * g
        first[name], second[name] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = params[name] - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, AdamState(first, second, t, b1, b2, state.eps)
