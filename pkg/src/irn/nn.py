"""Parameter containers and the two layer types the networks are built from."""
from __future__ import annotations

import contextlib
from typing import Iterator

import numpy as np

from .tensor import Parameter, ShapeError, Tensor, conv2d, get_default_dtype, linear


class Module:
    """Base class that discovers parameters and sub-modules through attributes.

    Attribute insertion order fixes the parameter order, so names such as
    ``modules.0.blocks.3.phi.convs.4.weight`` are stable across runs.
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")
                    elif isinstance(item, Parameter):
                        item.name = f"{name}.{i}"
                        yield item.name, item

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name not in state:
                raise KeyError(f"missing parameter {name} (shape {p.shape})")
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.astype(p.dtype).copy()
            p.grad = np.zeros_like(p.data)
        extra = sorted(set(state) - set(own))
        if extra:
            raise KeyError(f"unexpected parameter {extra[0]}")

    @contextlib.contextmanager
    def frozen(self):
        """Exclude this module's parameters from gradient recording."""
        params = self.parameters()
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p in params:
                p.requires_grad = True


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, padding: int | None = None,
                 rng: np.random.Generator | None = None, init_scale: float = 1.0,
                 negative_slope: float = 0.2):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        fan_in = in_channels * kernel_size * kernel_size
        # He-normal for leaky-ReLU layers
        std = np.sqrt(2.0 / ((1 + negative_slope ** 2) * fan_in))
        w = rng.standard_normal((out_channels, in_channels, kernel_size, kernel_size)) * std * init_scale
        dtype = get_default_dtype()
        self.weight = Parameter(w.astype(dtype))
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = 1.0 / np.sqrt(in_features)
        dtype = get_default_dtype()
        self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)).astype(dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


def randomize_(module: Module, rng: np.random.Generator, std: float = 0.05) -> Module:
    """Overwrite every parameter with N(0, std^2) noise (tests and self-checks)."""
    for p in module.parameters():
        p.data = (rng.standard_normal(p.shape) * std).astype(p.dtype)
        p.grad = np.zeros_like(p.data)
    return module
