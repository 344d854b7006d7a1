"""Model and training configuration, with flat ``key=value`` text round-tripping."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .attention import VARIANTS
from .tensor import ConfigError


def _parse_value(raw: str, kind):
    raw = raw.strip()
    if kind is bool:
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if raw.lower() in ("none", ""):
        return None
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    return raw


def _field_kind(f: dataclasses.Field):
    t = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", str(f.type))
    for name, kind in (("bool", bool), ("int", int), ("float", float)):
        if t.startswith(name):
            return kind
    return str


class _KeyValue:
    """Mixin: ``to_lines`` / ``from_mapping`` over dataclass fields."""

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_lines(self) -> list[str]:
        return [f"{k}={'none' if v is None else v}" for k, v in self.to_dict().items()]

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)}

    @classmethod
    def from_mapping(cls, mapping: dict, strict: bool = True):
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in known:
                if strict:
                    raise ConfigError(f"unknown {cls.__name__} key {key!r}")
                continue
            kwargs[key] = _parse_value(value, _field_kind(known[key])) if isinstance(value, str) else value
        return cls(**kwargs)


@dataclass
class ModelConfig(_KeyValue):
    src_vocab_size: int = 0
    tgt_vocab_size: int = 0
    d_model: int = 256
    n_heads: int = 8
    n_layers: int = 2
    d_ff: int = 1024
    kernel_size: int = 3
    cfer_blocks: int | None = None
    use_cfer: bool = True
    attention: str = "norm"
    cross_attention: str | None = None
    positional_encoding: str = "sinusoidal"
    dropout: float = 0.25
    max_src_len: int = 50
    max_tgt_len: int = 60
    linear_proj_dim: int = 32
    norm_gain: float | None = None
    pad_id: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.attention not in VARIANTS:
            raise ConfigError(f"attention must be one of {VARIANTS}, got {self.attention!r}")
        if self.cross_attention is not None and self.cross_attention not in VARIANTS:
            raise ConfigError(f"cross_attention must be one of {VARIANTS}, got {self.cross_attention!r}")
        if self.positional_encoding not in ("sinusoidal", "learned"):
            raise ConfigError(f"positional_encoding must be sinusoidal or learned, got {self.positional_encoding!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel_size must be a positive odd integer, got {self.kernel_size}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")

    @property
    def n_cfer_blocks(self) -> int:
        return self.n_layers if self.cfer_blocks is None else self.cfer_blocks

    @property
    def cross_variant(self) -> str:
        return self.cross_attention or self.attention


@dataclass
class TrainConfig(_KeyValue):
    learning_rate: float = 0.001
    batch_size: int = 12
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    patience: int | None = 5
    min_frequency: int = 2

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must be in [0, 1)")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive or none")


def read_key_values(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


PATH_KEYS = ("corpus", "checkpoint", "out", "log")


@dataclass
class RunConfig:
    """Everything a CLI command needs: model, training and path settings."""

    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)
    beam_size: int = 3

    @classmethod
    def from_mapping(cls, mapping: dict[str, str]) -> "RunConfig":
        model_keys, train_keys = ModelConfig.keys(), TrainConfig.keys()
        m, t, paths = {}, {}, {}
        beam = 3
        for key, value in mapping.items():
            if key in model_keys or key in train_keys:
                # seed is shared by both sections
                if key in model_keys:
                    m[key] = value
                if key in train_keys:
                    t[key] = value
            elif key in PATH_KEYS:
                paths[key] = value
            elif key == "beam_size":
                beam = int(value)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        if beam < 1:
            raise ConfigError("beam_size must be >= 1")
        return cls(ModelConfig.from_mapping(m), TrainConfig.from_mapping(t), paths, beam)

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict[str, str] | None = None) -> "RunConfig":
        mapping = read_key_values(Path(path).read_text(encoding="utf-8")) if path else {}
        mapping.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(mapping)
