"""Central-difference verification of analytic gradients."""

from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Tensor, backward


def gradient_check(
    build_loss: Callable[[], Tensor],
    params: list[Tensor] | dict[str, Tensor],
    h: float = 1e-6,
    n_coords: int = 200,
    seed: int = 0,
) -> float:
    """Return the max over sampled coordinates of
    ``|analytic - numeric| / max(1, |analytic|)``.

    ``build_loss`` must rebuild the graph from the current parameter values on
    every call and return a scalar tensor.
    """
    if not 1e-8 <= h <= 1e-4:
        raise ValueError(f"finite-difference step must lie in [1e-8, 1e-4], got {h}")
    if isinstance(params, dict):
        params = list(params.values())
    for p in params:
        p.zero_grad()
    loss = build_loss()
    if loss.size != 1:
        raise ValueError(f"gradient_check needs a scalar loss, got shape {loss.shape}")
    backward(loss)
    analytic = [p.grad.copy() for p in params]

    coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > n_coords:
        picked = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[k] for k in sorted(picked)]

    worst = 0.0
    for i, j in coords:
        flat = params[i].data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + h
        up = build_loss().item()
        flat[j] = orig - h
        down = build_loss().item()
        flat[j] = orig
        numeric = (up - down) / (2.0 * h)
        a = analytic[i].reshape(-1)[j]
        worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
