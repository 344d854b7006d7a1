"""The full encoder-decoder: token embeddings, Transformer encoder fused with
the convolutional feature branch, and a Transformer decoder."""

from __future__ import annotations

import math
from collections import OrderedDict

import numpy as np

from . import ops
from .attention import AttentionConfig
from .config import ModelConfig
from .corpus import EOS_ID, SOS_ID, Vocabulary, decode, encode, preprocess_code
from .decoding import BeamHypothesis, DecoderStack, beam_search, greedy_decode
from .layers import CodeFeatureExtractor, EncoderStack, Fusion, PositionalEncoder
from .nn import Dropout, Embedding, Linear, Module
from .tensor import ConfigError, ShapeError, Tensor, get_default_dtype, no_grad


class DeepPseudoModel(Module):
    def __init__(self, config: ModelConfig, dtype=None,
                 src_vocab: Vocabulary | None = None, tgt_vocab: Vocabulary | None = None):
        if config.src_vocab_size < 1 or config.tgt_vocab_size < 1:
            raise ConfigError("vocabulary sizes must be set before building the model")
        self.config = config
        self.src_vocab = src_vocab
        self.tgt_vocab = tgt_vocab
        dtype = dtype or get_default_dtype()
        c, seed = config, config.seed
        d = c.d_model

        def attn(variant: str, max_len: int) -> AttentionConfig:
            return AttentionConfig(variant, d, c.n_heads, c.linear_proj_dim, max_len, c.norm_gain)

        self.src_embed = Embedding(c.src_vocab_size, d, seed, "src_embed", dtype=dtype)
        self.src_pe = PositionalEncoder(c.positional_encoding, d, c.max_src_len, seed, "src_pe", dtype=dtype)
        self.encoder = EncoderStack(attn(c.attention, c.max_src_len), c.n_layers, c.d_ff, c.dropout, seed,
                                    dtype=dtype)
        if c.use_cfer:
            self.cfer = CodeFeatureExtractor(d, c.n_cfer_blocks, c.kernel_size, c.dropout, seed, dtype=dtype)
            self.fusion = Fusion(d, seed, dtype=dtype)
        self.tgt_embed = Embedding(c.tgt_vocab_size, d, seed, "tgt_embed", dtype=dtype)
        self.tgt_pe = PositionalEncoder(c.positional_encoding, d, c.max_tgt_len, seed, "tgt_pe", dtype=dtype)
        self.decoder = DecoderStack(attn(c.attention, c.max_tgt_len), attn(c.cross_variant, c.max_src_len),
                                    c.n_layers, c.d_ff, c.dropout, seed, dtype=dtype)
        self.generator = Linear(d, c.tgt_vocab_size, seed, "generator", dtype=dtype)
        self.embed_drop = Dropout(c.dropout, seed, "embed_drop")
        self._embed_scale = math.sqrt(d)

    # ------------------------------------------------------------ encoding

    def embed_source(self, src_ids) -> Tensor:
        """Scaled token embedding plus positional encoding (shared by both encoder branches)."""
        x = ops.scale(self.src_embed(src_ids), self._embed_scale)
        return self.embed_drop(self.src_pe(x))

    def encode_context(self, src_ids, src_pad=None) -> Tensor:
        return self.encoder(self.embed_source(src_ids), src_pad)

    def encode(self, src_ids, src_pad=None) -> Tensor:
        """Fused source representation Z (just C when the feature branch is off)."""
        src_ids = np.asarray(src_ids)
        if src_ids.shape[-1] > self.config.max_src_len:
            raise ShapeError(f"source length {src_ids.shape[-1]} exceeds max_src_len {self.config.max_src_len}")
        x = self.embed_source(src_ids)
        context = self.encoder(x, src_pad)
        if not self.config.use_cfer:
            return context
        return self.fusion(context, self.cfer(x, src_pad))

    # ------------------------------------------------------------ decoding

    def decode(self, memory: Tensor, memory_pad, tgt_in, tgt_pad=None) -> Tensor:
        """Teacher-forced logits (batch, len, tgt_vocab)."""
        tgt_in = np.asarray(tgt_in)
        if tgt_in.shape[-1] > self.config.max_tgt_len:
            raise ShapeError(f"target prefix length {tgt_in.shape[-1]} exceeds max_tgt_len "
                             f"{self.config.max_tgt_len}")
        y = ops.scale(self.tgt_embed(tgt_in), self._embed_scale)
        y = self.embed_drop(self.tgt_pe(y))
        y = self.decoder(y, memory, memory_pad, tgt_pad)
        return self.generator(y)

    def forward(self, src, src_pad, tgt_in, tgt_pad=None) -> Tensor:
        return self.decode(self.encode(src, src_pad), src_pad, tgt_in, tgt_pad)

    def loss(self, batch) -> Tensor:
        tgt_in, tgt_out = batch.tgt[:, :-1], batch.tgt[:, 1:]
        logits = self.forward(batch.src, batch.src_pad, tgt_in, batch.tgt_pad[:, :-1])
        return ops.cross_entropy(logits, tgt_out, pad_id=self.config.pad_id)

    def decode_step(self, memory: Tensor, memory_pad, prefixes) -> np.ndarray:
        """Log-probabilities of the next token for each prefix (all of equal length).

        ``memory`` holds a single source, (1, len, d); it is shared across prefixes.
        """
        prefixes = np.asarray(prefixes, dtype=np.int64)
        if prefixes.ndim == 1:
            prefixes = prefixes[None]
        n = prefixes.shape[0]
        mem = Tensor(np.broadcast_to(memory.data, (n,) + memory.shape[1:]))
        pad = None if memory_pad is None else np.broadcast_to(np.asarray(memory_pad), (n, memory.shape[1]))
        with no_grad():
            logits = self.decode(mem, pad, prefixes)
            return ops.log_softmax(logits[:, -1, :]).data

    # ------------------------------------------------------------ accounting

    def count_parameters(self) -> "OrderedDict[str, int]":
        """Learnable scalars grouped by top-level component, plus ``total``."""
        groups: OrderedDict[str, int] = OrderedDict()
        for name, p in self.named_parameters():
            top = name.split(".", 1)[0]
            groups[top] = groups.get(top, 0) + p.size
        groups["total"] = sum(v for k, v in groups.items())
        return groups


def count_parameters(model: DeepPseudoModel) -> "OrderedDict[str, int]":
    return model.count_parameters()


def _step_fn(model: DeepPseudoModel, memory: Tensor, memory_pad):
    def step(prefixes):
        return model.decode_step(memory, memory_pad, [list(p) for p in prefixes])
    return step


def search(model: DeepPseudoModel, src_ids, k: int = 3, n_max: int | None = None) -> BeamHypothesis:
    """Beam search for a single source id sequence."""
    was_training = model.training
    model.eval()
    try:
        src = np.asarray([list(src_ids)[: model.config.max_src_len]], dtype=np.int64)
        with no_grad():
            memory = model.encode(src)
        n_max = model.config.max_tgt_len if n_max is None else min(n_max, model.config.max_tgt_len)
        return beam_search(_step_fn(model, memory, None), SOS_ID, EOS_ID, k=k, n_max=n_max)
    finally:
        model.train(was_training)


def greedy(model: DeepPseudoModel, src_ids, n_max: int | None = None) -> BeamHypothesis:
    was_training = model.training
    model.eval()
    try:
        src = np.asarray([list(src_ids)[: model.config.max_src_len]], dtype=np.int64)
        with no_grad():
            memory = model.encode(src)
        n_max = model.config.max_tgt_len if n_max is None else min(n_max, model.config.max_tgt_len)
        return greedy_decode(_step_fn(model, memory, None), SOS_ID, EOS_ID, n_max=n_max)
    finally:
        model.train(was_training)


def generate(code_line: str, model: DeepPseudoModel, k: int = 3, n_max: int | None = None) -> str:
    """Translate one line of code into space-joined pseudo-code tokens."""
    if model.src_vocab is None or model.tgt_vocab is None:
        raise ConfigError("model has no vocabularies attached; load it from a checkpoint")
    tokens = preprocess_code(code_line)
    if not tokens:
        raise ValueError("cannot generate pseudo-code for an empty line")
    hyp = search(model, encode(tokens, model.src_vocab), k=k, n_max=n_max)
    return " ".join(decode(hyp.ids, model.tgt_vocab))
