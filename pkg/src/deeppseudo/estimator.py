"""scikit-learn style wrappers around preprocessing and the full model."""

from __future__ import annotations

import random

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import ModelConfig, TrainConfig
from .corpus import RawPair, decode, encode, preprocess_code, preprocess_pseudo, split_corpus
from .metrics import bleu, make_pairs
from .model import search
from .training import train
from .validation import check_aligned, check_fraction, check_lines, check_positive_int


class CodeTokenizer(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping code lines to token lists."""

    def __init__(self, join: bool = False):
        self.join = join

    def fit(self, X, y=None):
        check_lines(X, allow_empty_lines=True)
        return self

    def transform(self, X):
        tokens = [preprocess_code(line) for line in check_lines(X, allow_empty_lines=True)]
        return [" ".join(t) for t in tokens] if self.join else tokens


class PseudoCodeGenerator(BaseEstimator):
    """Train on aligned (code line, pseudo-code line) pairs, then translate new lines.

    ``valid_fraction`` of the fitted pairs is held out for early stopping;
    with 0 the training pairs double as the validation set.
    """

    def __init__(self, d_model: int = 256, n_heads: int = 8, n_layers: int = 2, d_ff: int | None = None,
                 kernel_size: int = 3, use_cfer: bool = True, attention: str = "norm",
                 positional_encoding: str = "sinusoidal", dropout: float = 0.25, max_src_len: int = 50,
                 max_tgt_len: int = 60, learning_rate: float = 1e-3, batch_size: int = 12, epochs: int = 20,
                 patience: int | None = 5, clip_norm: float | None = 1.0, min_frequency: int = 2,
                 beam_size: int = 3, valid_fraction: float = 0.1, random_state: int = 0):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.d_ff = d_ff
        self.kernel_size = kernel_size
        self.use_cfer = use_cfer
        self.attention = attention
        self.positional_encoding = positional_encoding
        self.dropout = dropout
        self.max_src_len = max_src_len
        self.max_tgt_len = max_tgt_len
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.min_frequency = min_frequency
        self.beam_size = beam_size
        self.valid_fraction = valid_fraction
        self.random_state = random_state

    def _configs(self) -> tuple[ModelConfig, TrainConfig]:
        model = ModelConfig(d_model=self.d_model, n_heads=self.n_heads, n_layers=self.n_layers,
                            d_ff=self.d_ff or 4 * self.d_model, kernel_size=self.kernel_size,
                            use_cfer=self.use_cfer, attention=self.attention,
                            positional_encoding=self.positional_encoding, dropout=self.dropout,
                            max_src_len=self.max_src_len, max_tgt_len=self.max_tgt_len, seed=self.random_state)
        training = TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
                               seed=self.random_state, clip_norm=self.clip_norm, patience=self.patience,
                               min_frequency=self.min_frequency)
        return model, training

    def fit(self, X, y):
        code = check_lines(X, "X")
        pseudo = check_lines(y, "y")
        check_aligned(code, pseudo)
        frac = check_fraction(self.valid_fraction, "valid_fraction")
        check_positive_int(self.beam_size, "beam_size")
        pairs = [RawPair(c, p, i) for i, (c, p) in enumerate(zip(code, pseudo))]
        order = list(range(len(pairs)))
        random.Random(self.random_state).shuffle(order)
        n_valid = int(round(frac * len(pairs)))
        if frac > 0 and n_valid == 0:
            n_valid = 1
        if n_valid >= len(pairs):
            raise ValueError("valid_fraction leaves no training pairs")
        valid = [pairs[i] for i in order[:n_valid]]
        fit_pairs = [pairs[i] for i in order[n_valid:]]
        corpus = split_corpus([], min_frequency=self.min_frequency,
                              presplit={"train": fit_pairs, "valid": valid or fit_pairs, "test": []})
        model_config, train_config = self._configs()
        result = train(corpus, model_config, train_config)
        self.model_ = result.model
        self.checkpoint_ = result.checkpoint
        self.history_ = result.history
        self.n_features_in_ = 1
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        out = []
        for line in check_lines(X, "X", allow_empty_lines=True):
            tokens = preprocess_code(line)
            if not tokens:
                out.append("")
                continue
            hyp = search(self.model_, encode(tokens, self.model_.src_vocab), k=self.beam_size)
            out.append(" ".join(decode(hyp.ids, self.model_.tgt_vocab)))
        return out

    def score(self, X, y) -> float:
        """Corpus BLEU in [0, 1] of the predictions against ``y``."""
        refs = [" ".join(preprocess_pseudo(line)) for line in check_lines(y, "y", allow_empty_lines=True)]
        hyps = self.predict(X)
        check_aligned(hyps, refs)
        return bleu(make_pairs(hyps, refs))
