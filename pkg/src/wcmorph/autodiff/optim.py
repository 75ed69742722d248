"""Adam with bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DimensionError
from .tensor import Tensor


@dataclass
class AdamState:
    alpha: float = 1e-4
    beta1: float = 0.0
    beta2: float = 0.9
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState) -> tuple[dict, AdamState]:
    """Update ``params`` in place and return ``(params, state)``.

    Moments are created lazily as zeros the first time a name is seen.
    """
    for name, p in params.items():
        if name not in grads:
            raise KeyError(f"no gradient for parameter {name!r}")
        if np.shape(grads[name]) != np.shape(p):
            raise DimensionError(f"{name}: gradient shape {np.shape(grads[name])} != parameter shape {np.shape(p)}")
        if name in state.m and state.m[name].shape != np.shape(p):
            raise DimensionError(f"{name}: moment shape does not match parameter")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.alpha * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params, state


class Adam:
    """Drives :func:`adam_step` over a module's named parameters."""

    def __init__(self, params: dict[str, Tensor], alpha: float = 1e-4, beta1: float = 0.0, beta2: float = 0.9, epsilon: float = 1e-8):
        self.params = params
        self.state = AdamState(alpha=alpha, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def step(self) -> None:
        data = {k: p.data for k, p in self.params.items()}
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(data, grads, self.state)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()
