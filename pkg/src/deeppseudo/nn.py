"""Module container and the basic learnable layers."""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np

from . import ops
from .tensor import ConfigError, Parameter, Tensor, get_default_dtype, make_rng


class Module:
    """Base class tracking parameters and sub-modules by attribute name.

    Parameters are discovered by walking instance attributes in definition
    order, which makes parameter names (and checkpoint layouts) stable.
    """

    training: bool = True

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{name}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data = np.ascontiguousarray(value.astype(p.dtype))


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None, dtype=None) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-bound, bound, size=shape).astype(dtype or get_default_dtype())


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, seed: int = 0, name: str = "linear", bias: bool = True, dtype=None):
        rng = make_rng(seed, name)
        dtype = dtype or get_default_dtype()
        self.weight = Parameter(xavier_uniform(rng, d_in, d_out, dtype=dtype))
        self.bias = Parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, vocab_size: int, dim: int, seed: int = 0, name: str = "embedding", dtype=None):
        rng = make_rng(seed, name)
        dtype = dtype or get_default_dtype()
        self.weight = Parameter(rng.normal(0.0, dim ** -0.5, size=(vocab_size, dim)).astype(dtype))

    def forward(self, ids) -> Tensor:
        return ops.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=None):
        dtype = dtype or get_default_dtype()
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class Conv1d(Module):
    """Same-length convolution; weights stored as (kernel, c_in, c_out)."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, seed: int = 0, name: str = "conv", dtype=None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {kernel_size}")
        rng = make_rng(seed, name)
        dtype = dtype or get_default_dtype()
        self.weight = Parameter(
            xavier_uniform(rng, kernel_size * c_in, c_out, shape=(kernel_size, c_in, c_out), dtype=dtype))
        self.bias = Parameter(np.zeros(c_out, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv1d(x, self.weight, self.bias)


class Dropout(Module):
    def __init__(self, p: float, seed: int = 0, name: str = "dropout"):
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {p}")
        self.p = p
        self.rng = make_rng(seed, name)

    def forward(self, x: Tensor) -> Tensor:
        return ops.dropout(x, self.p, self.rng, self.training)
