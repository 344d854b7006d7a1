"""Autoregressive decoder stack and the search procedures built on it."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import ops
from .attention import AttentionConfig, MultiHeadAttention
from .layers import FeedForward
from .nn import Dropout, LayerNorm, Module
from .tensor import Tensor

StepFn = Callable[[Sequence[Sequence[int]]], np.ndarray]


class DecoderLayer(Module):
    """Masked self-attention, cross-attention over the encoder memory, feed-forward.

    Each sub-layer is followed by dropout, a residual add and layer norm.
    """

    def __init__(self, self_attn: AttentionConfig, cross_attn: AttentionConfig, d_ff: int, dropout: float,
                 seed: int, name: str, dtype=None):
        self.self_attention = MultiHeadAttention(self_attn, seed, f"{name}.self", dtype=dtype)
        self.norm1 = LayerNorm(self_attn.d_model, dtype=dtype)
        self.cross_attention = MultiHeadAttention(cross_attn, seed, f"{name}.cross", dtype=dtype)
        self.norm2 = LayerNorm(self_attn.d_model, dtype=dtype)
        self.ff = FeedForward(self_attn.d_model, d_ff, seed, f"{name}.ff", dtype=dtype)
        self.norm3 = LayerNorm(self_attn.d_model, dtype=dtype)
        self.drop = Dropout(dropout, seed, f"{name}.drop")
        self.last_cross_weights: Tensor | None = None

    def forward(self, y: Tensor, memory: Tensor, memory_pad: np.ndarray | None,
                target_pad: np.ndarray | None = None) -> Tensor:
        out = self.self_attention(y, y, key_padding_mask=target_pad, causal=True)
        y = self.norm1(ops.add(y, self.drop(out.context)))
        cross = self.cross_attention(y, memory, key_padding_mask=memory_pad)
        self.last_cross_weights = cross.weights
        y = self.norm2(ops.add(y, self.drop(cross.context)))
        return self.norm3(ops.add(y, self.drop(self.ff(y))))


class DecoderStack(Module):
    def __init__(self, self_attn: AttentionConfig, cross_attn: AttentionConfig, n_layers: int, d_ff: int,
                 dropout: float, seed: int, name: str = "decoder", dtype=None):
        self.layers = [DecoderLayer(self_attn, cross_attn, d_ff, dropout, seed, f"{name}.{i}", dtype=dtype)
                       for i in range(n_layers)]

    def forward(self, y: Tensor, memory: Tensor, memory_pad=None, target_pad=None) -> Tensor:
        for layer in self.layers:
            y = layer(y, memory, memory_pad, target_pad)
        return y


@dataclass
class BeamHypothesis:
    """Cumulative log-probability, token ids (starting with SOS), finished flag."""

    score: float
    ids: list[int] = field(default_factory=list)
    finished: bool = False


def beam_search(step_fn: StepFn, sos_id: int, eos_id: int, k: int = 3, n_max: int = 60) -> BeamHypothesis:
    """Beam search over a next-token log-probability function.

    ``step_fn`` maps a list of prefixes to an (n_prefixes, vocab) array of
    log-probabilities. Finished hypotheses are carried to the next step
    unexpanded, every live hypothesis is expanded over the whole vocabulary,
    and the k best survive. Scores are raw sums of log-probabilities, no
    length normalisation. Ties keep the earlier candidate (hypothesis order,
    then token id). If the best final hypothesis never produced EOS, EOS is
    appended to it without changing its score.
    """
    if k < 1:
        raise ValueError("beam size k must be >= 1")
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    beam = [BeamHypothesis(0.0, [sos_id], False)]
    for _ in range(1, n_max):
        live = [h for h in beam if not h.finished]
        if not live:
            break
        logp = np.asarray(step_fn([h.ids for h in live]), dtype=np.float64)
        vocab = logp.shape[1]
        scores, origin, token = [], [], []
        row = 0
        for i, h in enumerate(beam):
            if h.finished:
                scores.append(np.array([h.score]))
                origin.append(np.array([i]))
                token.append(np.array([-1]))
            else:
                scores.append(h.score + logp[row])
                origin.append(np.full(vocab, i))
                token.append(np.arange(vocab))
                row += 1
        scores_a = np.concatenate(scores)
        origin_a = np.concatenate(origin)
        token_a = np.concatenate(token)
        top = np.argsort(-scores_a, kind="stable")[:k]
        next_beam = []
        for j in top:
            parent = beam[origin_a[j]]
            if token_a[j] < 0:
                next_beam.append(parent)
            else:
                y = int(token_a[j])
                next_beam.append(BeamHypothesis(float(scores_a[j]), parent.ids + [y], y == eos_id))
        beam = next_beam
    best = beam[int(np.argmax([h.score for h in beam]))]
    if not best.finished:
        best = BeamHypothesis(best.score, best.ids + [eos_id], True)
    return best


def greedy_decode(step_fn: StepFn, sos_id: int, eos_id: int, n_max: int = 60) -> BeamHypothesis:
    """Pick the arg-max token at every step until EOS or ``n_max`` - 1 tokens."""
    if n_max < 2:
        raise ValueError("n_max must be >= 2")
    ids = [sos_id]
    score = 0.0
    for _ in range(1, n_max):
        row = np.asarray(step_fn([ids]), dtype=np.float64)[0]
        y = int(np.argmax(row))
        score = float(score + row[y])
        ids.append(y)
        if y == eos_id:
            return BeamHypothesis(score, ids, True)
    return BeamHypothesis(score, ids + [eos_id], True)
