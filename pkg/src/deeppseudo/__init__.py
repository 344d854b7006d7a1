"""Python code to pseudo-code translation with a Transformer encoder-decoder,
a convolutional code feature branch and several attention variants."""

from .attention import AttentionConfig, MultiHeadAttention, init_norm_gain
from .checkpoint import Checkpoint, CheckpointError
from .config import ModelConfig, RunConfig, TrainConfig
from .corpus import Vocabulary, build_vocab, load_corpus, preprocess_code, preprocess_pseudo
from .decoding import BeamHypothesis, beam_search, greedy_decode
from .estimator import CodeTokenizer, PseudoCodeGenerator
from .metrics import MetricReport, bleu, cider, evaluate_corpus, meteor, rouge_l, sample_size
from .model import DeepPseudoModel, count_parameters, generate
from .tensor import ConfigError, DegenerateBatchError, GradientTape, Parameter, ShapeError, Tensor
from .training import adam_step, train

__version__ = "0.1.0"

__all__ = [
    "AttentionConfig",
    "BeamHypothesis",
    "Checkpoint",
    "CheckpointError",
    "CodeTokenizer",
    "ConfigError",
    "DeepPseudoModel",
    "DegenerateBatchError",
    "GradientTape",
    "MetricReport",
    "ModelConfig",
    "MultiHeadAttention",
    "Parameter",
    "PseudoCodeGenerator",
    "RunConfig",
    "ShapeError",
    "Tensor",
    "TrainConfig",
    "Vocabulary",
    "adam_step",
    "beam_search",
    "bleu",
    "build_vocab",
    "cider",
    "count_parameters",
    "evaluate_corpus",
    "generate",
    "greedy_decode",
    "init_norm_gain",
    "load_corpus",
    "meteor",
    "preprocess_code",
    "preprocess_pseudo",
    "rouge_l",
    "sample_size",
    "train",
]
