from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, weights: dict[str, np.ndarray], lr: float = 2e-4, **kw) -> "AdamState":
        return cls({k: np.zeros_like(w) for k, w in weights.items()},
                   {k: np.zeros_like(w) for k, w in weights.items()}, 0, lr, **kw)


def adam_update(weights: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step. Inputs are left untouched."""
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_w, new_m, new_v = {}, {}, {}
    for k, w in weights.items():
        g = grads[k]
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        new_w[k] = w - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    return new_w, AdamState(new_m, new_v, step, state.lr, b1, b2, state.eps)
