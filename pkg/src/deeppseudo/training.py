"""Adam, teacher-forced training, validation and checkpoint bookkeeping."""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .attention import init_norm_gain
from .checkpoint import Checkpoint
from .config import ModelConfig, TrainConfig
from .corpus import EncodedPair, ParallelCorpus, batch_iterator
from .model import DeepPseudoModel, count_parameters  # noqa: F401  re-exported
from .tensor import GradientTape, Parameter, no_grad

log = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    """Raised instead of applying an update computed from NaN/Inf gradients."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint: Checkpoint | None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], grads: Sequence[np.ndarray | None], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              names: Sequence[str] | None = None) -> AdamState:
    """One bias-corrected Adam update, in place on ``params``.

    Parameters without a gradient are treated as having a zero gradient so
    their moments still decay. Non-finite gradients abort the step before
    anything is modified.
    """
    names = list(names) if names is not None else [str(i) for i in range(len(params))]
    for name, p, g in zip(names, params, grads):
        if g is not None and g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for parameter {name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p, g in zip(names, params, grads):
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.data = (p.data - update).astype(p.dtype)
    return state


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    """Rescale gradients so their global l2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= p.dtype.type(factor)
    return total


class Trainer:
    """Owns a model, its optimizer state and the step function."""

    def __init__(self, model: DeepPseudoModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.state = AdamState()
        self.named = list(model.named_parameters())

    def step(self, batch) -> float:
        model = self.model
        model.train()
        model.zero_grad()
        with GradientTape() as tape:
            loss = model.loss(batch)
        value = float(loss.data)
        if not math.isfinite(value):
            return value
        tape.backward(loss)
        params = [p for _, p in self.named]
        if self.config.clip_norm is not None:
            clip_grad_norm(params, self.config.clip_norm)
        c = self.config
        adam_step(params, [p.grad for p in params], self.state, c.learning_rate, c.beta1, c.beta2,
                  c.adam_eps, names=[n for n, _ in self.named])
        return value

    def optimizer_state(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, _ in self.named:
            if name in self.state.m:
                out[f"adam.m.{name}"] = self.state.m[name]
                out[f"adam.v.{name}"] = self.state.v[name]
        return out

    def load_optimizer_state(self, records: dict, step: int) -> None:
        self.state = AdamState(step=step)
        for key, value in records.items():
            kind, name = key[len("adam."):].split(".", 1)
            (self.state.m if kind == "m" else self.state.v)[name] = np.asarray(value, dtype=np.float32)


def evaluate_loss(model: DeepPseudoModel, split: Sequence[EncodedPair], batch_size: int = 12) -> float:
    """Token-weighted mean cross-entropy over a split, in eval mode."""
    was_training = model.training
    model.eval()
    total, tokens = 0.0, 0
    try:
        with no_grad():
            for batch in batch_iterator(split, batch_size, model.config.max_src_len, model.config.max_tgt_len,
                                        seed=None):
                n = int((~batch.tgt_pad[:, 1:]).sum())
                total += float(model.loss(batch).data) * n
                tokens += n
    finally:
        model.train(was_training)
    return total / max(tokens, 1)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    seconds: float


@dataclass
class TrainResult:
    model: DeepPseudoModel
    checkpoint: Checkpoint
    history: list[EpochRecord]
    best_epoch: int
    last: Checkpoint | None = None


def make_checkpoint(model: DeepPseudoModel, trainer: Trainer | None = None, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(model.config, model.src_vocab, model.tgt_vocab, model.state_dict(),
                      trainer.optimizer_state() if trainer is not None else OrderedDict(),
                      dict(meta or {}))


def prepare_model_config(corpus: ParallelCorpus, config: ModelConfig) -> ModelConfig:
    """Fill vocabulary sizes and, for norm attention, the initial gain from training lengths."""
    updates = {"src_vocab_size": len(corpus.src_vocab), "tgt_vocab_size": len(corpus.tgt_vocab)}
    uses_norm = "norm" in (config.attention, config.cross_variant)
    if uses_norm and config.norm_gain is None:
        src_lengths = [min(len(p.code), config.max_src_len) for p in corpus.train]
        tgt_lengths = [min(len(p.pseudo), config.max_tgt_len) for p in corpus.train]
        try:
            updates["norm_gain"] = init_norm_gain(src_lengths, tgt_lengths)
        except ValueError:
            log.warning("training sequences too short to derive the norm gain; keeping the default")
    return replace(config, **updates)


def write_log_header(path: Path) -> None:
    path.write_text("epoch\ttrain_loss\tvalid_loss\tseconds\n", encoding="utf-8")


def append_log(path: Path, rec: EpochRecord) -> None:
    with path.open("a", encoding="utf-8") as fh:
        fh.write(f"{rec.epoch}\t{rec.train_loss:.6f}\t{rec.valid_loss:.6f}\t{rec.seconds:.2f}\n")


def train(corpus: ParallelCorpus, model_config: ModelConfig, train_config: TrainConfig,
          checkpoint_path: str | Path | None = None, log_path: str | Path | None = None,
          resume: Checkpoint | None = None, dtype=np.float32,
          on_epoch: Callable[[EpochRecord, DeepPseudoModel], None] | None = None) -> TrainResult:
    """Teacher-forced cross-entropy training with per-epoch validation.

    Keeps the parameters with the lowest validation loss, stops after
    ``patience`` epochs without improvement, and raises
    :class:`TrainingDiverged` (carrying the last good checkpoint) if the loss
    turns non-finite.
    """
    if not corpus.train or not corpus.valid:
        raise ValueError("training needs non-empty train and valid splits")
    if resume is not None:
        model = resume.build_model(dtype)
        model_config = model.config
        start_epoch = int(resume.meta.get("epoch", 0))
    else:
        model_config = prepare_model_config(corpus, model_config)
        model = DeepPseudoModel(model_config, dtype=dtype, src_vocab=corpus.src_vocab, tgt_vocab=corpus.tgt_vocab)
        start_epoch = 0
    trainer = Trainer(model, train_config)
    if resume is not None and resume.optimizer:
        trainer.load_optimizer_state(resume.optimizer, int(resume.meta.get("step", 0)))

    log_file = Path(log_path) if log_path else None
    if log_file is not None and (resume is None or not log_file.exists()):
        write_log_header(log_file)

    history: list[EpochRecord] = []
    best_loss = float(resume.meta.get("valid_loss", "inf")) if resume is not None else math.inf
    best = make_checkpoint(model, trainer, {"epoch": start_epoch, "valid_loss": best_loss,
                                            "step": trainer.state.step})
    best_epoch = start_epoch
    stale = 0
    c = train_config
    for epoch in range(start_epoch + 1, start_epoch + c.epochs + 1):
        started = time.perf_counter()
        losses, weights = [], []
        for batch in batch_iterator(corpus.train, c.batch_size, model_config.max_src_len, model_config.max_tgt_len,
                                    seed=c.seed, epoch=epoch):
            value = trainer.step(batch)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} in epoch {epoch}", best)
            losses.append(value)
            weights.append(int((~batch.tgt_pad[:, 1:]).sum()))
        train_loss = float(np.average(losses, weights=weights))
        valid_loss = evaluate_loss(model, corpus.valid, c.batch_size)
        rec = EpochRecord(epoch, train_loss, valid_loss, time.perf_counter() - started)
        history.append(rec)
        log.info("epoch %d train %.4f valid %.4f (%.1fs)", epoch, train_loss, valid_loss, rec.seconds)
        if log_file is not None:
            append_log(log_file, rec)
        if valid_loss < best_loss:
            best_loss, best_epoch, stale = valid_loss, epoch, 0
            best = make_checkpoint(model, trainer, {"epoch": epoch, "valid_loss": valid_loss,
                                                    "step": trainer.state.step})
            if checkpoint_path is not None:
                ckpt_io.save(best, checkpoint_path)
        else:
            stale += 1
        # the hook runs after the snapshot so it cannot leak into the best checkpoint
        if on_epoch is not None:
            on_epoch(rec, model)
        if c.patience is not None and stale >= c.patience:
            log.info("no validation improvement for %d epochs; stopping", stale)
            break
    if checkpoint_path is not None and not Path(checkpoint_path).exists():
        ckpt_io.save(best, checkpoint_path)
    last_epoch = history[-1].epoch if history else start_epoch
    last = make_checkpoint(model, trainer, {"epoch": last_epoch, "step": trainer.state.step,
                                            "valid_loss": history[-1].valid_loss if history else best_loss})
    return TrainResult(best.build_model(dtype), best, history, best_epoch, last)

