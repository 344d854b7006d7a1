"""Attention kernels (dot-product, linear, synthesizer, norm) and the
multi-head wrapper that hosts them.

The kernels work on any number of leading axes; the last two are
(sequence, features). Masks are boolean numpy arrays where True means
"may not attend here".
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import ops
from .nn import Linear, Module, xavier_uniform
from .tensor import ConfigError, Parameter, ShapeError, Tensor, get_default_dtype, make_rng

VARIANTS = ("self", "linear", "synthesizer", "norm")


@dataclass
class AttentionOutput:
    context: Tensor
    weights: Tensor


@dataclass
class AttentionConfig:
    variant: str = "norm"
    d_model: int = 256
    n_heads: int = 8
    proj_dim: int = 32
    max_len: int = 50
    norm_gain: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown attention variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.proj_dim < 1:
            raise ConfigError("proj_dim must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def causal_mask(len_q: int, len_k: int | None = None) -> np.ndarray:
    """True above the diagonal: query i may not see key j > i."""
    len_k = len_q if len_k is None else len_k
    return np.triu(np.ones((len_q, len_k), dtype=bool), k=1)


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"queries {q.shape} and keys {k.shape} differ in head dimension")


def self_attention(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> AttentionOutput:
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(d_k)) v``."""
    _check_qkv(q, k, v)
    scores = ops.scale(ops.matmul(q, ops.swap_last(k)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.softmax(scores, axis=-1, mask=mask)
    return AttentionOutput(ops.matmul(weights, v), weights)


def linear_attention(q: Tensor, k: Tensor, v: Tensor, e: Tensor, f: Tensor,
                     key_padding: np.ndarray | None = None) -> AttentionOutput:
    """Low-rank attention ``softmax(q (E^T k)^T / sqrt(d_k)) (F^T v)``.

    ``e`` and ``f`` are (len_k, proj_dim) and project along the sequence axis,
    so the weights come out as (len_q, proj_dim). Padded key positions are
    zeroed before projection via ``key_padding`` (broadcastable to
    ``k.shape[:-1]``).
    """
    _check_qkv(q, k, v)
    len_k = k.shape[-2]
    if e.shape[0] != len_k or f.shape[0] != len_k:
        raise ShapeError(f"projections {e.shape}/{f.shape} must have {len_k} rows")
    if e.shape[1] > len_k:
        warnings.warn(f"linear attention projection dim {e.shape[1]} exceeds key length {len_k}; no savings",
                      stacklevel=2)
    if key_padding is not None:
        pad = np.asarray(key_padding, dtype=bool)[..., None]
        k = ops.masked_fill(k, pad)
        v = ops.masked_fill(v, pad)
    k_proj = ops.matmul(ops.swap_last(e), k)
    v_proj = ops.matmul(ops.swap_last(f), v)
    scores = ops.scale(ops.matmul(q, ops.swap_last(k_proj)), 1.0 / math.sqrt(q.shape[-1]))
    weights = ops.softmax(scores, axis=-1)
    return AttentionOutput(ops.matmul(weights, v_proj), weights)


def synthesizer_attention(x: Tensor, w1: Tensor, w2: Tensor, b1: Tensor, b2: Tensor, values: Tensor,
                          mask: np.ndarray | None = None) -> AttentionOutput:
    """Dense synthesizer: alignment scores come from each query token alone.

    ``B = relu(x W1 + b1) W2 + b2`` gives (len_q, l) scores which are cut to
    the key length before the softmax. ``values`` is G(X), already computed.
    """
    max_len = w2.shape[-1]
    len_q, len_k = x.shape[-2], values.shape[-2]
    if len_q > max_len or len_k > max_len:
        raise ShapeError(f"sequence length {max(len_q, len_k)} exceeds synthesizer length {max_len}")
    hidden = ops.relu(ops.linear(x, w1, b1))
    scores = ops.linear(hidden, w2, b2)[..., :len_k]
    weights = ops.softmax(scores, axis=-1, mask=mask)
    return AttentionOutput(ops.matmul(weights, values), weights)


def norm_attention(q: Tensor, k: Tensor, v: Tensor, gain, mask: np.ndarray | None = None,
                   eps: float = 1e-8) -> AttentionOutput:
    """``softmax(g * q_hat k_hat^T) v`` with rows of q and k l2-normalised."""
    _check_qkv(q, k, v)
    q_hat = ops.l2_normalize(q, eps=eps)
    k_hat = ops.l2_normalize(k, eps=eps)
    cosine = ops.matmul(q_hat, ops.swap_last(k_hat))
    gain = gain if isinstance(gain, Tensor) else Tensor(np.asarray(gain, dtype=q.dtype))
    weights = ops.softmax(ops.mul(cosine, gain), axis=-1, mask=mask)
    return AttentionOutput(ops.matmul(weights, v), weights)


def init_norm_gain(*length_lists) -> float:
    """Initial norm-attention gain ``log2(L^2 - L)``.

    ``L`` is the 97.5th percentile (linear interpolation) of all lengths in
    the given lists, typically source and target training lengths.
    """
    lengths = np.concatenate([np.asarray(list(ls), dtype=np.float64) for ls in length_lists]) \
        if length_lists else np.empty(0)
    if lengths.size == 0:
        raise ValueError("init_norm_gain needs at least one length")
    L = float(np.percentile(lengths, 97.5))
    if L < 2:
        raise ValueError(f"97.5th percentile length {L} < 2 makes log2(L^2 - L) undefined or negative")
    return math.log2(L * L - L)


class MultiHeadAttention(Module):
    """Per-head projections, one attention kernel, concat and output projection.

    ``forward(query, memory)`` takes (batch, len, d_model) inputs. Weights for
    every head are returned so they can be exported.
    """

    def __init__(self, config: AttentionConfig, seed: int = 0, name: str = "attn", dtype=None):
        self.config = config
        dtype = dtype or get_default_dtype()
        d, h = config.d_model, config.n_heads
        if config.variant != "synthesizer":
            self.q_proj = Linear(d, d, seed, f"{name}.q", dtype=dtype)
            self.k_proj = Linear(d, d, seed, f"{name}.k", dtype=dtype)
        self.v_proj = Linear(d, d, seed, f"{name}.v", dtype=dtype)
        self.out_proj = Linear(d, d, seed, f"{name}.out", dtype=dtype)
        if config.variant == "linear":
            rng = make_rng(seed, f"{name}.ef")
            shape = (config.max_len, config.proj_dim)
            self.e_proj = Parameter(xavier_uniform(rng, *shape, dtype=dtype))
            self.f_proj = Parameter(xavier_uniform(rng, *shape, dtype=dtype))
        elif config.variant == "synthesizer":
            self.syn_hidden = Linear(d, d, seed, f"{name}.syn1", dtype=dtype)
            self.syn_out = Linear(d, h * config.max_len, seed, f"{name}.syn2", dtype=dtype)
        elif config.variant == "norm":
            g0 = config.norm_gain
            if g0 is None:
                g0 = math.log2(config.max_len ** 2 - config.max_len) if config.max_len >= 2 else 1.0
            self.gain = Parameter(np.full((h, 1, 1), g0, dtype=dtype))

    def _heads(self, x: Tensor) -> Tensor:
        b, n, _ = x.shape
        h = self.config.n_heads
        return ops.transpose(ops.reshape(x, (b, n, h, self.config.head_dim)), (0, 2, 1, 3))

    def forward(self, query: Tensor, memory: Tensor, key_padding_mask: np.ndarray | None = None,
                causal: bool = False) -> AttentionOutput:
        squeeze = query.ndim == 2
        if squeeze:
            query = ops.reshape(query, (1,) + query.shape)
            memory = ops.reshape(memory, (1,) + memory.shape)
            if key_padding_mask is not None:
                key_padding_mask = np.asarray(key_padding_mask)[None]
        b, len_q, d = query.shape
        len_k = memory.shape[1]
        if d != self.config.d_model or memory.shape[2] != d:
            raise ShapeError(f"attention expects d_model={self.config.d_model}, got {query.shape}/{memory.shape}")

        mask = None
        if key_padding_mask is not None:
            mask = np.asarray(key_padding_mask, dtype=bool)[:, None, None, :]
        if causal:
            cm = causal_mask(len_q, len_k)[None, None]
            mask = cm if mask is None else (mask | cm)

        variant = self.config.variant
        v = self._heads(self.v_proj(memory))
        if variant == "synthesizer":
            hidden = ops.relu(self.syn_hidden(query))
            scores = self.syn_out(hidden)
            scores = ops.transpose(ops.reshape(scores, (b, len_q, self.config.n_heads, self.config.max_len)),
                                   (0, 2, 1, 3))
            if len_q > self.config.max_len or len_k > self.config.max_len:
                raise ShapeError(f"sequence length exceeds synthesizer length {self.config.max_len}")
            weights = ops.softmax(scores[..., :len_k], axis=-1, mask=mask)
            out = AttentionOutput(ops.matmul(weights, v), weights)
        else:
            q = self._heads(self.q_proj(query))
            k = self._heads(self.k_proj(memory))
            if variant == "norm":
                out = norm_attention(q, k, v, self.gain, mask=mask)
            elif variant == "linear" and not causal:
                if len_k > self.config.max_len:
                    raise ShapeError(f"key length {len_k} exceeds linear-attention length {self.config.max_len}")
                pad = None
                if key_padding_mask is not None:
                    pad = np.asarray(key_padding_mask, dtype=bool)[:, None, :]
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    out = linear_attention(q, k, v, self.e_proj[:len_k], self.f_proj[:len_k], key_padding=pad)
            else:
                # the sequence-axis projection cannot respect a causal mask,
                # so causal linear attention uses the dense kernel
                out = self_attention(q, k, v, mask=mask)

        ctx = ops.reshape(ops.transpose(out.context, (0, 2, 1, 3)), (b, len_q, d))
        ctx = self.out_proj(ctx)
        weights = out.weights
        if squeeze:
            ctx = ops.reshape(ctx, ctx.shape[1:])
            weights = ops.reshape(weights, weights.shape[1:])
        return AttentionOutput(ctx, weights)


def multi_head(config: AttentionConfig, query: Tensor, memory: Tensor | None = None, *, seed: int = 0,
               key_padding_mask=None, causal: bool = False) -> AttentionOutput:
    """One-shot multi-head attention with freshly initialised projections."""
    layer = MultiHeadAttention(config, seed=seed, dtype=query.dtype)
    return layer(query, query if memory is None else memory, key_padding_mask, causal)
