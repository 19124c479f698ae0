"""Small module system on top of the autodiff engine: parameter registry and layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import Tensor, ops


def Parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Module:
    """Attribute-registered parameters and submodules, in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from _walk(value, f"{prefix}{name}")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _walk(value, name: str) -> Iterator[tuple[str, Tensor]]:
    if isinstance(value, Tensor) and value.requires_grad:
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    """y = x W + b over the last axis. ``weight`` has shape (in, out)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = Parameter(rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out)))
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        depthwise: bool = False,
        bias: bool = True,
    ) -> None:
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.groups = c_in if depthwise else 1
        fan_in = kernel * kernel * (1 if depthwise else c_in)
        shape = (c_out, 1 if depthwise else c_in, kernel, kernel)
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, d: int) -> None:
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


def channel_layer_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer-normalise each spatial position of an (N, C, H, W) map over channels."""
    t = ops.transpose(x, (0, 2, 3, 1))
    return ops.transpose(norm(t), (0, 3, 1, 2))
