"""Differentiable operations on :class:`~deeppseudo.tensor.Tensor`.

Every function computes its forward value with numpy and, when a gradient
tape is recording and some input requires grad, registers a closure that
maps the output gradient to one gradient per input.

Broadcasting is deliberately narrow: one operand of a binary elementwise op
may broadcast against the other, but the result must have the shape of one
of them. Mutual broadcasting (``(3, 1) + (1, 4)``) raises :class:`ShapeError`.
"""

from __future__ import annotations

import builtins

import numpy as np

from .tensor import (
    ConfigError,
    DegenerateBatchError,
    ShapeError,
    Tensor,
    recording,
)

MASK_FILL = -1e9


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward) -> Tensor:
    needs = builtins.any(t.requires_grad for t in inputs)
    tape = recording() if needs else None
    out = Tensor(data, requires_grad=tape is not None, dtype=data.dtype)
    if tape is not None:
        tape.record(inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0 or np.prod(shape) == 1:
        return g.sum().reshape(shape)
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    try:
        joint = np.broadcast_shapes(sa, sb)
    except ValueError:
        joint = None
    if joint not in (sa, sb):
        raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def masked_fill(x: Tensor, mask: np.ndarray, value: float = 0.0) -> Tensor:
    """Replace entries where the constant boolean ``mask`` is True."""
    mask = np.asarray(mask, dtype=bool)
    if np.broadcast_shapes(mask.shape, x.shape) != x.shape:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}")

    def backward(g):
        return (np.where(mask, 0, g).astype(g.dtype),)

    return _emit(np.where(mask, x.dtype.type(value), x.data), (x,), backward)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _emit(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _emit(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _emit(ad * bd, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def backward(g):
        return (g * factor,)

    return _emit(x.data * x.dtype.type(factor), (x,), backward)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return _emit(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0

    def backward(g):
        return (g * keep,)

    return _emit(np.where(keep, x.data, 0).astype(x.dtype), (x,), backward)


def log(x: Tensor) -> Tensor:
    xd = x.data

    def backward(g):
        return (g / xd,)

    return _emit(np.log(xd), (x,), backward)


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def backward(g):
        return (g * out,)

    return _emit(out, (x,), backward)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must be in [0, 1), got {p}")
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)

    def backward(g):
        return (g * mask,)

    return _emit(x.data * mask, (x,), backward)


# ---------------------------------------------------------------- reductions / shape


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape) -> Tensor:
    original = x.shape

    def backward(g):
        return (g.reshape(original),)

    return _emit(x.data.reshape(shape), (x,), backward)


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.ascontiguousarray(g.transpose(inverse)),)

    return _emit(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def take_slice(x: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _emit(np.ascontiguousarray(x.data[index]), (x,), backward)


def split_last(x: Tensor, parts: int) -> list[Tensor]:
    size = x.shape[-1]
    if size % parts:
        raise ShapeError(f"cannot split last dimension {size} into {parts} parts")
    step = size // parts
    return [take_slice(x, (..., slice(i * step, (i + 1) * step))) for i in range(parts)]


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: dimension mismatch between {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit(ad @ bd, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight shaped (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, backward)


# ---------------------------------------------------------------- normalisation


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` is a boolean array broadcastable to ``x``; True entries are
    excluded (their logits are replaced by a large negative constant).
    """
    z = x.data
    if mask is not None:
        z = np.where(mask, z.dtype.type(MASK_FILL), z)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _emit(out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _emit(out, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must match last dim {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    gd = gain.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, ggain, gbias

    return _emit(xhat * gd + bias.data, (x, gain, bias), backward)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """``row / (||row|| + eps)`` along ``axis``; zero rows map to zero."""
    xd = x.data
    norm = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    denom = norm + eps
    out = xd / denom

    def backward(g):
        dot = (g * xd).sum(axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        coef = np.where(norm > 0, dot / (denom * denom * safe), 0.0)
        return (g / denom - xd * coef,)

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------- sequence ops


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table``; the backward pass scatter-adds per id."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)][0]
        raise IndexError(f"embedding id {int(bad)} out of range for table of size {vocab}")

    def backward(g):
        full = np.zeros(table.shape, dtype=g.dtype)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _emit(table.data[ids], (table,), backward)


def conv1d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Same-length 1-D cross-correlation over the sequence axis.

    ``x`` is (..., length, c_in), ``weight`` is (kernel, c_in, c_out) and the
    sequence is zero-padded by (kernel - 1) / 2 on both sides.
    """
    k, c_in, c_out = weight.shape
    if k % 2 == 0:
        raise ConfigError(f"conv1d needs an odd kernel size, got {k}")
    if x.shape[-1] != c_in:
        raise ShapeError(f"conv1d: input channels {x.shape[-1]} != kernel channels {c_in}")
    pad = (k - 1) // 2
    xd = x.data
    length = xd.shape[-2]
    widths = [(0, 0)] * (xd.ndim - 2) + [(pad, pad), (0, 0)]
    padded = np.pad(xd, widths)
    # cols[..., t, j, :] = padded[..., t + j, :]
    cols = np.stack([padded[..., j:j + length, :] for j in range(k)], axis=-2)
    flat_w = weight.data.reshape(k * c_in, c_out)
    flat_cols = cols.reshape(*cols.shape[:-2], k * c_in)
    out = flat_cols @ flat_w
    if bias is not None:
        out = out + bias.data

    def backward(g):
        g2 = g.reshape(-1, c_out)
        gw = (flat_cols.reshape(-1, k * c_in).T @ g2).reshape(k, c_in, c_out)
        gcols = (g @ flat_w.T).reshape(*g.shape[:-1], k, c_in)
        gpad = np.zeros(padded.shape, dtype=g.dtype)
        for j in range(k):
            gpad[..., j:j + length, :] += gcols[..., j, :]
        gx = gpad[..., pad:pad + length, :]
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, backward)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half."""
    d2 = x.shape[-1]
    if d2 % 2:
        raise ShapeError(f"glu needs an even last dimension, got {d2}")
    d = d2 // 2
    a = x.data[..., :d]
    gate = _sigmoid(np.ascontiguousarray(x.data[..., d:]))

    def backward(g):
        ga = g * gate
        gb = g * a * gate * (1.0 - gate)
        return (np.concatenate([ga, gb], axis=-1),)

    return _emit(a * gate, (x,), backward)


def cross_entropy(logits: Tensor, targets, pad_id: int | None = None) -> Tensor:
    """Mean negative log-likelihood over positions whose target is not ``pad_id``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise IndexError(f"cross_entropy: target id outside vocabulary of size {vocab}")
    keep = np.ones(targets.shape, dtype=bool) if pad_id is None else targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise DegenerateBatchError("cross_entropy: every position is padding")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def backward(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, targets[..., None], 1.0, axis=-1)
        grad = (p - onehot) * keep[..., None] * (float(g) / count)
        return (grad.astype(logits.dtype),)

    return _emit(np.asarray(loss, dtype=logits.dtype), (logits,), backward)
