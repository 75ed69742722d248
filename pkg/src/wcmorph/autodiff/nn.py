"""Small layer containers with named parameters and buffers."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import ops
from .tensor import Tensor

INIT_STD = 0.01


class Module:
    """Base class. Parameters, buffers and submodules are discovered from
    instance attributes in definition order, so naming is deterministic."""

    training = True

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, np.ndarray):
                out[name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(name + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_buffers(f"{name}.{i}."))
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Parameters and buffers as plain arrays (copies)."""
        state = {k: v.data.copy() for k, v in self.named_parameters().items()}
        state.update({k: v.copy() for k, v in self.named_buffers().items()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch; missing={missing} unexpected={extra}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data[...] = state[k]
        for k, b in buffers.items():
            b[...] = state[k]

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self._set_mode(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _set_mode(self, mode: bool) -> None:
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value._set_mode(mode)
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        item._set_mode(mode)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = False, std: float = INIT_STD):
        self.weight = Tensor(rng.normal(0.0, std, size=(n_out, n_in)), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.fully_connected(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, stride: int, padding: int, rng: np.random.Generator, std: float = INIT_STD):
        self.weight = Tensor(rng.normal(0.0, std, size=(c_out, c_in, kernel, kernel)), requires_grad=True)
        self.stride = stride
        self.padding = padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class BatchNorm(Module):
    def __init__(self, n: int):
        self.gamma = Tensor(np.ones(n), requires_grad=True)
        self.beta = Tensor(np.zeros(n), requires_grad=True)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)

    def forward(self, x: Tensor) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.running_mean, self.running_var, self.training)


class UntiedBias(Module):
    """One learned offset per output element (per channel and pixel)."""

    def __init__(self, shape: tuple, init: np.ndarray | None = None):
        value = np.zeros(shape) if init is None else np.broadcast_to(init, shape).astype(np.float64)
        self.bias = Tensor(value, requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.bias


@contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradient tracking for every parameter of ``modules``."""
    params = [p for m in modules for p in m.named_parameters().values()]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p in params:
            p.requires_grad = True
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
