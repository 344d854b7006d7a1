"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Differentiable operations live in
:mod:`deeppseudo.ops`; while a :class:`GradientTape` is active they append a
node (inputs, output, local backward rule) to it, and ``tape.backward(loss)``
replays the nodes in reverse order. Outside a tape nothing is recorded, which
is what inference uses.
"""

from __future__ import annotations

import contextlib
import zlib
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "GradientTape",
    "ShapeError",
    "ConfigError",
    "DegenerateBatchError",
    "default_dtype",
    "get_default_dtype",
    "set_default_dtype",
    "make_rng",
    "tensor",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ConfigError(ValueError):
    """Raised for invalid layer or model configuration."""


class DegenerateBatchError(ValueError):
    """Raised when a loss has no non-padding positions to average over."""


_DEFAULT_DTYPE = np.dtype(np.float32)


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigError(f"unsupported float width {dtype}")
    _DEFAULT_DTYPE = dtype


@contextlib.contextmanager
def default_dtype(dtype) -> Iterator[None]:
    """Temporarily switch the float width used for new tensors."""
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def make_rng(seed: int, name: str = "") -> np.random.Generator:
    """Return an independent generator for ``name`` derived from ``seed``.

    Streams are keyed by a hash of the name, so adding a new named stream
    never shifts the values drawn by existing ones.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(key,))))


class Tensor:
    """A numpy array plus an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            arr = np.asarray(data)
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # operator sugar, resolved lazily to avoid an import cycle with ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, (int, float)):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.take_slice(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)


class Parameter(Tensor):
    """A learnable tensor; always requires grad."""

    __slots__ = ()

    def __init__(self, data, dtype=None, name: str | None = None):
        super().__init__(data, requires_grad=True, dtype=dtype, name=name)


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable):
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_ACTIVE_TAPES: list["GradientTape"] = []


class GradientTape:
    """Append-only record of differentiable operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` once per recorded pass. ``clear`` drops the record so
    the tape can be reused for the next step.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradientTape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def clear(self) -> None:
        self.nodes.clear()

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor, grad: np.ndarray | None = None) -> None:
        """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor requiring grad."""
        if grad is None:
            if loss.size != 1:
                raise ShapeError(f"backward needs an explicit gradient for non-scalar output {loss.shape}")
            grad = np.ones_like(loss.data)
        produced = {id(node.output) for node in self.nodes}
        if id(loss) not in produced:
            if loss.requires_grad:
                loss.accumulate_grad(np.asarray(grad, dtype=loss.dtype))
            return
        # intermediate gradients live here; leaves receive theirs in .grad
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=loss.dtype)}
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.backward(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in produced:
                    grads[key] = grads[key] + g if key in grads else g
                else:
                    inp.accumulate_grad(np.asarray(g, dtype=inp.dtype))


def recording() -> GradientTape | None:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Suspend recording on all active tapes."""
    saved = list(_ACTIVE_TAPES)
    _ACTIVE_TAPES.clear()
    try:
        yield
    finally:
        _ACTIVE_TAPES.extend(saved)
