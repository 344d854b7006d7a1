"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"DPSC" | version | config_len | config (UTF-8 key=value lines)
    | src_vocab_len | src vocab (UTF-8, one token per line)
    | tgt_vocab_len | tgt vocab
    | records until EOF: name_len | name | rank | dims... | float32 LE payload

Config keys prefixed ``meta.`` carry training metadata; records named
``adam.m.*`` / ``adam.v.*`` carry optional optimizer moments.
"""

from __future__ import annotations

import io
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, read_key_values
from .corpus import Vocabulary

MAGIC = b"DPSC"
VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or incompatible checkpoint files."""


@dataclass
class Checkpoint:
    config: ModelConfig
    src_vocab: Vocabulary
    tgt_vocab: Vocabulary
    params: "OrderedDict[str, np.ndarray]"
    optimizer: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: dict = field(default_factory=dict)

    def build_model(self, dtype=np.float32):
        from .model import DeepPseudoModel

        model = DeepPseudoModel(self.config, dtype=dtype, src_vocab=self.src_vocab, tgt_vocab=self.tgt_vocab)
        try:
            model.load_state_dict(self.params)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"checkpoint does not match its own model config: {exc}") from exc
        model.eval()
        return model


def _u32(value: int) -> bytes:
    return struct.pack("<I", value)


def _block(text: str) -> bytes:
    raw = text.encode("utf-8")
    return _u32(len(raw)) + raw


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_u32(VERSION))
    lines = ckpt.config.to_lines() + [f"meta.{k}={v}" for k, v in ckpt.meta.items()]
    buf.write(_block("\n".join(lines)))
    buf.write(_block("\n".join(ckpt.src_vocab.itos)))
    buf.write(_block("\n".join(ckpt.tgt_vocab.itos)))
    records = list(ckpt.params.items()) + list(ckpt.optimizer.items())
    for name, arr in records:
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(_u32(len(raw)))
        buf.write(raw)
        buf.write(_u32(arr.ndim))
        for dim in arr.shape:
            buf.write(_u32(dim))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(ckpt))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    @property
    def done(self) -> bool:
        return self.pos >= len(self.data)


def loads(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries = read_key_values(r.text())
    meta = {k[5:]: v for k, v in entries.items() if k.startswith("meta.")}
    config = ModelConfig.from_mapping({k: v for k, v in entries.items() if not k.startswith("meta.")})
    src_vocab = Vocabulary.from_list(r.text().split("\n"))
    tgt_vocab = Vocabulary.from_list(r.text().split("\n"))
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    optimizer: OrderedDict[str, np.ndarray] = OrderedDict()
    while not r.done:
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
        (optimizer if name.startswith("adam.") else params)[name] = arr
    if config.src_vocab_size != len(src_vocab) or config.tgt_vocab_size != len(tgt_vocab):
        raise CheckpointError("vocabulary sizes in the config do not match the stored vocabularies")
    return Checkpoint(config, src_vocab, tgt_vocab, params, optimizer, meta)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return loads(path.read_bytes())


def load_model(path: str | Path, dtype=np.float32):
    return load(path).build_model(dtype)
