"""Positional encodings, encoder stack, convolutional code feature extractor
and the additive fusion of the two encoder branches."""

from __future__ import annotations

import math

import numpy as np

from . import ops
from .attention import AttentionConfig, MultiHeadAttention
from .nn import Conv1d, Dropout, LayerNorm, Linear, Module
from .tensor import ConfigError, Parameter, ShapeError, Tensor, get_default_dtype, make_rng

RESIDUAL_SCALE = math.sqrt(0.5)


def sinusoid_table(max_len: int, d_model: int, dtype=None) -> np.ndarray:
    """Rows are positions; even columns sin, odd columns cos of pos / 10000^(2i/d)."""
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, two_i / d_model)
    table = np.zeros((max_len, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d_model // 2])
    return table.astype(dtype or get_default_dtype())


class PositionalEncoder(Module):
    """Adds a position table (fixed sinusoid or learned) to embedded tokens."""

    def __init__(self, kind: str, d_model: int, max_len: int, seed: int = 0, name: str = "pe", dtype=None):
        if kind not in ("sinusoidal", "learned"):
            raise ConfigError(f"positional encoding must be 'sinusoidal' or 'learned', got {kind!r}")
        self.kind = kind
        self.max_len = max_len
        dtype = dtype or get_default_dtype()
        if kind == "sinusoidal":
            self.table = Tensor(sinusoid_table(max_len, d_model, dtype))
        else:
            rng = make_rng(seed, name)
            self.table = Parameter(rng.normal(0.0, d_model ** -0.5, size=(max_len, d_model)).astype(dtype))

    def forward(self, embedded: Tensor) -> Tensor:
        length = embedded.shape[-2]
        if length > self.max_len:
            raise ShapeError(f"sequence length {length} exceeds positional table length {self.max_len}")
        return ops.add(embedded, self.table[:length])


def positional_encode(embedded: Tensor, encoder: PositionalEncoder) -> Tensor:
    return encoder(embedded)


class FeedForward(Module):
    def __init__(self, d_model: int, d_ff: int, seed: int, name: str, dtype=None):
        self.inner = Linear(d_model, d_ff, seed, f"{name}.inner", dtype=dtype)
        self.outer = Linear(d_ff, d_model, seed, f"{name}.outer", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.outer(ops.relu(self.inner(x)))


class EncoderLayer(Module):
    """Post-norm block: attention, add & norm, feed-forward, add & norm."""

    def __init__(self, attn: AttentionConfig, d_ff: int, dropout: float, seed: int, name: str, dtype=None):
        self.attention = MultiHeadAttention(attn, seed, f"{name}.attn", dtype=dtype)
        self.norm1 = LayerNorm(attn.d_model, dtype=dtype)
        self.ff = FeedForward(attn.d_model, d_ff, seed, f"{name}.ff", dtype=dtype)
        self.norm2 = LayerNorm(attn.d_model, dtype=dtype)
        self.drop = Dropout(dropout, seed, f"{name}.drop")
        self.last_weights: Tensor | None = None

    def forward(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        out = self.attention(x, x, key_padding_mask=pad_mask)
        self.last_weights = out.weights
        x = self.norm1(ops.add(x, self.drop(out.context)))
        return self.norm2(ops.add(x, self.drop(self.ff(x))))


class EncoderStack(Module):
    def __init__(self, attn: AttentionConfig, n_layers: int, d_ff: int, dropout: float, seed: int,
                 name: str = "encoder", dtype=None):
        self.layers = [EncoderLayer(attn, d_ff, dropout, seed, f"{name}.{i}", dtype=dtype) for i in range(n_layers)]

    def forward(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        for layer in self.layers:
            x = layer(x, pad_mask)
        return x


class ConvBlock(Module):
    def __init__(self, d_model: int, kernel_size: int, seed: int, name: str, dtype=None):
        # channel doubling happens in the conv; GLU halves it again
        self.conv = Conv1d(d_model, 2 * d_model, kernel_size, seed, f"{name}.conv", dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return ops.scale(ops.add(x, ops.glu(self.conv(x))), RESIDUAL_SCALE)


class CodeFeatureExtractor(Module):
    """Stacked conv -> GLU -> scaled residual blocks, then a projection to d_model."""

    def __init__(self, d_model: int, n_blocks: int, kernel_size: int, dropout: float, seed: int,
                 name: str = "cfer", dtype=None):
        if n_blocks < 1:
            raise ConfigError("the feature extractor needs at least one block")
        self.blocks = [ConvBlock(d_model, kernel_size, seed, f"{name}.{i}", dtype=dtype) for i in range(n_blocks)]
        self.proj = Linear(d_model, d_model, seed, f"{name}.proj", dtype=dtype)
        self.drop = Dropout(dropout, seed, f"{name}.drop")

    def forward(self, x: Tensor, pad_mask: np.ndarray | None = None) -> Tensor:
        pad = None if pad_mask is None else np.asarray(pad_mask, dtype=bool)[..., None]
        for block in self.blocks:
            if pad is not None:
                # keep right padding from leaking into real positions through the kernel
                x = ops.masked_fill(x, pad)
            x = self.drop(block(x))
        return self.proj(x)


def extract_features(embedded_with_pe: Tensor, extractor: CodeFeatureExtractor, pad_mask=None) -> Tensor:
    return extractor(embedded_with_pe, pad_mask)


class Fusion(Module):
    """``Z = C + Linear(F)``."""

    def __init__(self, d_model: int, seed: int, name: str = "fuse", dtype=None):
        self.proj = Linear(d_model, d_model, seed, name, dtype=dtype)

    def forward(self, context: Tensor, features: Tensor) -> Tensor:
        if context.shape != features.shape:
            raise ShapeError(f"fusion needs equal shapes, got {context.shape} and {features.shape}")
        return ops.add(context, self.proj(features))


def fuse(context: Tensor, features: Tensor, fusion: Fusion) -> Tensor:
    return fusion(context, features)
