"""Layer / module abstractions: parameter registry, conv + norm blocks, init.

Modules discover parameters, buffers and children through attribute order,
so checkpoint manifests and init sequences are deterministic.
"""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import functional as F
from .tensor import Tensor

__all__ = [
    "Parameter",
    "Module",
    "Sequential",
    "ModuleList",
    "Conv2d",
    "BatchNorm2d",
    "Dropout2d",
    "Activation",
    "ConvBNAct",
    "count_parameters",
    "parameter_breakdown",
]


class Parameter(Tensor):
    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    def __init__(self):
        self.training = True
        self._buffers: dict[str, np.ndarray] = {}

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    # -- registry -----------------------------------------------------------

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value

    def children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, ModuleList):
                for i, child in enumerate(value):
                    yield f"{name}.{i}", child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> Iterator[Parameter]:
        for _, p in self.named_parameters():
            yield p

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, child in self.children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.children():
            yield from child.modules()

    # -- mode / gradients ----------------------------------------------------

    def train(self, flag: bool = True) -> "Module":
        for m in self.modules():
            m.training = flag
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def to_dtype(self, dtype) -> "Module":
        """Convert parameters and float buffers in place (float64 for grad checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        for m in self.modules():
            for name, buf in m._buffers.items():
                if np.issubdtype(buf.dtype, np.floating):
                    m._buffers[name] = buf.astype(dtype)
        return self

    # -- init -----------------------------------------------------------------

    def init_weights(self, rng: np.random.Generator) -> "Module":
        """Recursive deterministic init; leaves override ``reset_parameters``."""
        self.reset_parameters(rng)
        for _, child in self.children():
            child.init_weights(rng)
        return self

    def reset_parameters(self, rng: np.random.Generator) -> None:
        pass


class ModuleList(list):
    """Plain list of modules that participates in registration."""


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = ModuleList(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def __iter__(self):
        return iter(self.layers)

    def __getitem__(self, i):
        return self.layers[i]


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size, stride=1,
                 padding=0, groups: int = 1, bias: bool = True):
        super().__init__()
        kh, kw = (kernel_size, kernel_size) if isinstance(kernel_size, int) else kernel_size
        if in_channels % groups or out_channels % groups:
            raise ValueError(
                f"in/out channels must be divisible by groups: {in_channels}, {out_channels}, groups={groups}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = (kh, kw)
        self.stride = stride
        self.padding = padding
        self.groups = groups
        self.weight = Parameter(np.zeros((out_channels, in_channels // groups, kh, kw)))
        self.bias = Parameter(np.zeros(out_channels)) if bias else None

    def reset_parameters(self, rng: np.random.Generator) -> None:
        # Kaiming-uniform, fan-in mode; biases start at zero.
        fan_in = self.weight.data[0].size
        bound = np.sqrt(6.0 / fan_in)
        self.weight.data = rng.uniform(-bound, bound, self.weight.data.shape).astype(
            self.weight.data.dtype
        )
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, stride=self.stride,
                        padding=self.padding, groups=self.groups)


class BatchNorm2d(Module):
    """Standard batchnorm: batch statistics while training, running ones in eval.

    Normalization uses the biased batch variance; running_var keeps the
    unbiased estimate, so externally converted pretrained weights line up.
    """

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def reset_parameters(self, rng: np.random.Generator) -> None:
        self.weight.data = np.ones_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)
        self._buffers["running_mean"][:] = 0
        self._buffers["running_var"][:] = 1

    def forward(self, x: Tensor) -> Tensor:
        if x.data.shape[1] != self.channels:
            raise ValueError(f"batchnorm built for {self.channels} channels, input has {x.data.shape[1]}")
        w = self.weight.reshape(1, self.channels, 1, 1)
        b = self.bias.reshape(1, self.channels, 1, 1)
        if self.training:
            mu = x.mean(axis=(0, 2, 3), keepdims=True)
            centered = x - mu
            var = (centered * centered).mean(axis=(0, 2, 3), keepdims=True)
            inv = (var + self.eps) ** -0.5
            out = centered * inv * w + b
            n = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
            correction = n / max(n - 1, 1)
            rm, rv = self._buffers["running_mean"], self._buffers["running_var"]
            rm *= 1 - self.momentum
            rm += self.momentum * mu.data.reshape(-1).astype(rm.dtype)
            rv *= 1 - self.momentum
            rv += self.momentum * correction * var.data.reshape(-1).astype(rv.dtype)
            return out
        rm = Tensor(self._buffers["running_mean"].reshape(1, self.channels, 1, 1).astype(x.data.dtype))
        rv = Tensor(self._buffers["running_var"].reshape(1, self.channels, 1, 1).astype(x.data.dtype))
        inv = (rv + self.eps) ** -0.5
        return (x - rm) * inv * w + b


class Dropout2d(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor) -> Tensor:
        return F.dropout2d(x, self.p, training=self.training)


class Activation(Module):
    def __init__(self, kind: str):
        super().__init__()
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        return F.activation(x, self.kind)


class ConvBNAct(Module):
    """conv -> batchnorm -> activation, the pervasive block of both encoders."""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 groups=1, act: Optional[str] = "relu"):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                           padding=padding, groups=groups, bias=False)
        self.bn = BatchNorm2d(out_channels)
        self.act = act

    def forward(self, x: Tensor) -> Tensor:
        x = self.bn(self.conv(x))
        if self.act is not None:
            x = F.activation(x, self.act)
        return x


def count_parameters(module: Module) -> int:
    """Exact count of trainable scalars."""
    return sum(p.data.size for p in module.parameters())


def parameter_breakdown(module: Module) -> dict[str, int]:
    """Per-child parameter counts plus the total, in registration order."""
    table = {name: count_parameters(child) for name, child in module.children()}
    own = sum(v.data.size for v in vars(module).values() if isinstance(v, Parameter))
    if own:
        table["(own)"] = own
    table["total"] = count_parameters(module)
    return table
