"""Parameter containers and the primitive layers the architecture is built from."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import functional as F
from .rng import Rng
from .tensor import ConfigurationError, Tensor, scope


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, dtype=np.float32):
        super().__init__(np.asarray(data, dtype=dtype), requires_grad=True)


class Module:
    """Tree of named parameters and submodules, discovered from attributes.

    Calling a module runs ``forward`` inside a naming scope so that MAC
    counters can attribute work to the submodule that did it.
    """

    _path: str = ""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield from _walk(name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            if isinstance(value, Parameter):
                yield f"{prefix}{name}", value
            else:
                yield from value.named_parameters(f"{prefix}{name}.")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def assign_paths(self) -> None:
        for path, module in self.named_modules():
            module._path = path

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ConfigurationError(f"parameter {name}: shape {arr.shape} != expected {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def __call__(self, *args, **kwargs):
        with scope(self._path):
            return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError


def _walk(name: str, value) -> Iterator[tuple[str, object]]:
    """Parameters and modules reachable through nested lists, tuples and dicts."""
    if isinstance(value, (Parameter, Module)):
        yield name, value
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(f"{name}.{i}", item)
    elif isinstance(value, dict):
        for key, item in value.items():
            yield from _walk(f"{name}.{key}", item)


def kaiming_uniform(rng: Rng, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in) if fan_in > 0 else 0.0
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng: Rng, stride: int = 1,
                 padding: int | None = None, dilation: int = 1, bias: bool = True):
        if in_c < 1 or out_c < 1:
            raise ConfigurationError(f"Conv2d channels must be >= 1 (got {in_c}->{out_c})")
        self.in_c, self.out_c, self.k = in_c, out_c, k
        self.stride, self.dilation = stride, dilation
        self.padding = dilation * (k // 2) if padding is None else padding
        self.weight = Parameter(kaiming_uniform(rng, (out_c, in_c, k, k), in_c * k * k))
        self.bias = Parameter(np.zeros(out_c)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)


class ConvTranspose2d(Module):
    def __init__(self, in_c: int, out_c: int, k: int, rng: Rng, stride: int = 2,
                 padding: int | None = None, output_padding: int | None = None, bias: bool = True):
        self.in_c, self.out_c, self.k, self.stride = in_c, out_c, k, stride
        self.padding = k // 2 if padding is None else padding
        # makes the output exactly stride * input for odd k
        self.output_padding = (stride - 1) if output_padding is None else output_padding
        self.weight = Parameter(kaiming_uniform(rng, (in_c, out_c, k, k), out_c * k * k))
        self.bias = Parameter(np.zeros(out_c)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                  self.output_padding)


def default_groups(channels: int, max_groups: int = 8, min_per_group: int = 4) -> int:
    """Largest divisor of ``channels`` up to ``max_groups`` leaving ``min_per_group`` channels per group.

    Single-channel groups would zero every channel's spatial mean, leaving
    global-pool gates downstream with a constant input.
    """
    for g in range(min(max_groups, channels // min_per_group), 0, -1):
        if channels % g == 0:
            return g
    return 1


class GroupNorm(Module):
    def __init__(self, channels: int, groups: int | None = None, eps: float = 1e-5,
                 affine: bool = False):
        self.groups = default_groups(channels) if groups is None else groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels)) if affine else None
        self.bias = Parameter(np.zeros(channels)) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return F.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class Linear(Module):
    """``x @ W + b`` over the last axis."""

    def __init__(self, in_f: int, out_f: int, rng: Rng, bias: bool = True):
        self.weight = Parameter(kaiming_uniform(rng, (in_f, out_f), in_f))
        self.bias = Parameter(np.zeros(out_f)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = F.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class ConvNormAct(Module):
    """conv (with bias) -> parameter-free group norm -> activation."""

    def __init__(self, in_c: int, out_c: int, k: int, rng: Rng, stride: int = 1,
                 dilation: int = 1, act: str = "silu", norm: bool = True):
        self.conv = Conv2d(in_c, out_c, k, rng, stride=stride, dilation=dilation)
        self.norm = GroupNorm(out_c) if norm else None
        self.act = act

    def forward(self, x: Tensor, dilation: int | None = None) -> Tensor:
        if dilation is None:
            y = self.conv(x)
        else:
            y = F.conv2d(x, self.conv.weight, self.conv.bias, self.conv.stride, dilation, dilation)
        if self.norm is not None:
            y = self.norm(y)
        return F.ACTIVATIONS[self.act](y)
