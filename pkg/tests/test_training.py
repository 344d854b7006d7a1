"""Adam, the training loop, checkpoints, resume and parameter accounting."""

import math
from dataclasses import replace

import numpy as np
import pytest

from deeppseudo import checkpoint as ckpt_io
from deeppseudo import training
from deeppseudo.checkpoint import CheckpointError
from deeppseudo.config import ModelConfig, TrainConfig
from deeppseudo.corpus import batch_iterator, load_corpus
from deeppseudo.model import DeepPseudoModel
from deeppseudo.tensor import Parameter
from deeppseudo.training import (AdamState, NonFiniteGradientError, Trainer, TrainingDiverged, adam_step,
                                 clip_grad_norm, count_parameters, evaluate_loss, make_checkpoint, train)


@pytest.fixture(scope="module")
def toy(toy_corpus_dir):
    return load_corpus(toy_corpus_dir, seed=0, min_frequency=1)


def small_config(**kw) -> ModelConfig:
    base = dict(d_model=32, n_heads=4, n_layers=1, d_ff=64, dropout=0.0, max_src_len=40, max_tgt_len=40)
    base.update(kw)
    return ModelConfig(**base)


# ------------------------------------------------------------------ Adam


def test_adam_first_step_moves_by_learning_rate():
    p = Parameter(np.zeros(3))
    adam_step([p], [np.array([1.0, -2.0, 0.5])], AdamState(), lr=1e-3)
    np.testing.assert_allclose(p.data, [-1e-3, 1e-3, -1e-3], rtol=1e-7)


def test_adam_zero_gradient_is_a_no_op_first():
    p = Parameter(np.array([0.3, -0.7]))
    state = adam_step([p], [np.zeros(2)], AdamState())
    np.testing.assert_array_equal(p.data, [0.3, -0.7])
    assert state.step == 1


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(5))
    x = p.data.copy()
    m = np.zeros(5)
    v = np.zeros(5)
    state = AdamState()
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    for t in range(1, 31):
        g = rng.standard_normal(5)
        adam_step([p], [g], state, lr, b1, b2, eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p.data, x, rtol=0, atol=1e-12)


def test_adam_missing_gradient_decays_moments():
    p = Parameter(np.zeros(2))
    state = adam_step([p], [np.ones(2)], AdamState(), names=["w"])
    m_before = state.m["w"].copy()
    adam_step([p], [None], state, names=["w"])
    np.testing.assert_allclose(state.m["w"], 0.9 * m_before)


def test_adam_rejects_non_finite_gradients_before_updating():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    state = AdamState()
    with pytest.raises(NonFiniteGradientError):
        adam_step([a, b], [np.ones(2), np.array([1.0, np.nan])], state)
    np.testing.assert_array_equal(a.data, 1.0)
    assert state.step == 0
    with pytest.raises(ValueError):
        adam_step([a], [np.ones(3)], state)


def test_clip_grad_norm():
    a, b = Parameter(np.zeros(2)), Parameter(np.zeros(1))
    a.grad, b.grad = np.array([3.0, 0.0]), np.array([4.0])
    assert clip_grad_norm([a, b], 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose(np.concatenate([a.grad, b.grad]), [0.6, 0, 0.8])
    assert clip_grad_norm([a, b], 10.0) == pytest.approx(1.0)


# ------------------------------------------------------------------ steps


def test_one_step_lowers_the_batch_loss(toy):
    failures = 0
    batches = list(batch_iterator(toy.train, 12, 40, 40, seed=0))
    for trial in range(20):
        cfg = training.prepare_model_config(toy, small_config(seed=trial, attention=["self", "norm"][trial % 2]))
        model = DeepPseudoModel(cfg, dtype=np.float64)
        trainer = Trainer(model, TrainConfig(learning_rate=1e-4, clip_norm=None))
        batch = batches[trial % len(batches)]
        before = trainer.step(batch)
        model.eval()
        after = float(model.loss(batch).data)
        failures += after >= before
    assert failures <= 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_step_with_non_finite_loss_leaves_parameters_alone(toy):
    cfg = training.prepare_model_config(toy, small_config())
    model = DeepPseudoModel(cfg)
    model.generator.bias.data[0] = np.inf
    snapshot = {n: p.data.copy() for n, p in model.named_parameters()}
    trainer = Trainer(model, TrainConfig())
    assert not math.isfinite(trainer.step(next(batch_iterator(toy.train, 4, 40, 40))))
    for n, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, snapshot[n])


def test_evaluate_loss_is_token_weighted(toy):
    cfg = training.prepare_model_config(toy, small_config())
    model = DeepPseudoModel(cfg, dtype=np.float64)
    whole = evaluate_loss(model, toy.valid, batch_size=len(toy.valid))
    assert evaluate_loss(model, toy.valid, batch_size=3) == pytest.approx(whole, rel=1e-12)
    assert model.training


# ------------------------------------------------------------------ the loop


def test_training_reduces_loss_and_logs(toy, tmp_path):
    ckpt, log = tmp_path / "m.dpsc", tmp_path / "log.tsv"
    result = train(toy, small_config(), TrainConfig(epochs=6, patience=None), ckpt, log)
    assert result.history[-1].train_loss < result.history[0].train_loss
    rows = log.read_text().splitlines()
    assert rows[0].split("\t") == ["epoch", "train_loss", "valid_loss", "seconds"]
    assert len(rows) == 7
    best = min(result.history, key=lambda r: r.valid_loss)
    assert result.best_epoch == best.epoch
    loaded = ckpt_io.load(ckpt)
    assert int(loaded.meta["epoch"]) == best.epoch
    for name, arr in loaded.params.items():
        np.testing.assert_array_equal(arr, result.checkpoint.params[name])


def test_trajectory_is_bitwise_reproducible(toy):
    runs = [train(toy, small_config(), TrainConfig(epochs=2, patience=None)) for _ in range(2)]
    assert [r.train_loss for r in runs[0].history] == [r.train_loss for r in runs[1].history]
    for name, arr in runs[0].last.params.items():
        np.testing.assert_array_equal(arr, runs[1].last.params[name])


def test_resume_matches_uninterrupted_run(toy, tmp_path):
    straight = train(toy, small_config(), TrainConfig(epochs=4, patience=None))
    half = train(toy, small_config(), TrainConfig(epochs=2, patience=None))
    path = tmp_path / "last.dpsc"
    ckpt_io.save(half.last, path)
    resumed = train(toy, small_config(), TrainConfig(epochs=2, patience=None), resume=ckpt_io.load(path))
    assert [r.epoch for r in resumed.history] == [3, 4]
    for name, arr in straight.last.params.items():
        np.testing.assert_array_equal(resumed.last.params[name], arr)
    assert resumed.last.meta["step"] == straight.last.meta["step"]


def test_early_stopping(toy, monkeypatch):
    losses = iter([1.0, 2.0, 3.0, 0.5, 0.1])
    monkeypatch.setattr(training, "evaluate_loss", lambda *a, **k: next(losses))
    result = train(toy, small_config(), TrainConfig(epochs=5, patience=2))
    assert [r.epoch for r in result.history] == [1, 2, 3]
    assert result.best_epoch == 1


def test_divergence_raises_with_last_good_checkpoint(toy):
    def poison(rec, model):
        if rec.epoch == 1:
            model.generator.bias.data[:] = np.nan

    with pytest.raises(TrainingDiverged) as info:
        train(toy, small_config(), TrainConfig(epochs=3, patience=None), on_epoch=poison)
    good = info.value.checkpoint
    assert int(good.meta["epoch"]) == 1
    assert all(np.all(np.isfinite(a)) for a in good.params.values())


def test_training_needs_train_and_valid(toy):
    with pytest.raises(ValueError):
        train(replace(toy, valid=[]), small_config(), TrainConfig(epochs=1))


def test_norm_gain_is_derived_from_training_lengths(toy):
    cfg = training.prepare_model_config(toy, small_config(attention="norm"))
    lengths = sorted([len(p.code) for p in toy.train] + [len(p.pseudo) for p in toy.train])
    L = float(np.percentile(lengths, 97.5))
    assert cfg.norm_gain == pytest.approx(math.log2(L * L - L), abs=1e-12)
    assert cfg.src_vocab_size == len(toy.src_vocab) and cfg.tgt_vocab_size == len(toy.tgt_vocab)


# ------------------------------------------------------------------ checkpoints


def test_checkpoint_round_trip_is_bitwise(toy, tmp_path):
    cfg = training.prepare_model_config(toy, small_config(attention="linear", positional_encoding="learned"))
    model = DeepPseudoModel(cfg, src_vocab=toy.src_vocab, tgt_vocab=toy.tgt_vocab)
    trainer = Trainer(model, TrainConfig())
    trainer.step(next(batch_iterator(toy.train, 4, 40, 40)))
    ckpt = make_checkpoint(model, trainer, {"epoch": 3})
    path = tmp_path / "x.dpsc"
    ckpt_io.save(ckpt, path)
    back = ckpt_io.load(path)
    assert back.config == cfg and back.meta == {"epoch": "3"}
    assert back.src_vocab == toy.src_vocab and back.tgt_vocab == toy.tgt_vocab
    assert list(back.params) == list(ckpt.params)
    for name, arr in ckpt.params.items():
        np.testing.assert_array_equal(back.params[name], arr)
    for name, arr in ckpt.optimizer.items():
        np.testing.assert_array_equal(back.optimizer[name], arr)
    rebuilt = back.build_model()
    batch = next(batch_iterator(toy.valid, 4, 40, 40, seed=None))
    model.eval()
    np.testing.assert_array_equal(rebuilt.loss(batch).data, model.loss(batch).data)


def test_checkpoint_errors(toy, tmp_path):
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "missing.dpsc")
    with pytest.raises(CheckpointError):
        ckpt_io.loads(b"NOPE" + bytes(8))
    cfg = training.prepare_model_config(toy, small_config())
    raw = ckpt_io.dumps(make_checkpoint(DeepPseudoModel(cfg, src_vocab=toy.src_vocab, tgt_vocab=toy.tgt_vocab)))
    with pytest.raises(CheckpointError):
        ckpt_io.loads(raw[:-3])
    with pytest.raises(CheckpointError):
        ckpt_io.loads(raw[:4] + (99).to_bytes(4, "little") + raw[8:])


# ------------------------------------------------------------------ parameter accounting


def expected_parameters(cfg: ModelConfig) -> int:
    """Closed-form count for self attention with the feature branch."""
    d, f, h = cfg.d_model, cfg.d_ff, cfg.n_heads
    attn = 4 * (d * d + d)
    ff = d * f + f + f * d + d
    ln = 2 * d
    enc = cfg.n_layers * (attn + ff + 2 * ln)
    dec = cfg.n_layers * (2 * attn + ff + 3 * ln)
    cfer = cfg.n_cfer_blocks * (cfg.kernel_size * d * 2 * d + 2 * d) + d * d + d
    fusion = d * d + d
    emb = (cfg.src_vocab_size + cfg.tgt_vocab_size) * d
    gen = d * cfg.tgt_vocab_size + cfg.tgt_vocab_size
    del h
    return enc + dec + cfer + fusion + emb + gen


def reference_sized(**kw) -> ModelConfig:
    return ModelConfig(src_vocab_size=5000, tgt_vocab_size=7000, attention="self", **kw)


def test_parameter_count_matches_closed_form():
    cfg = reference_sized()
    counts = count_parameters(DeepPseudoModel(cfg))
    assert counts["total"] == expected_parameters(cfg)
    assert counts["src_embed"] == 5000 * 256 and counts["tgt_embed"] == 7000 * 256
    assert sum(v for k, v in counts.items() if k != "total") == counts["total"]


def test_variant_specific_parameters():
    base = count_parameters(DeepPseudoModel(reference_sized()))["total"]
    norm = count_parameters(DeepPseudoModel(replace(reference_sized(), attention="norm", norm_gain=5.0)))["total"]
    # one gain per head in each of the six attention modules (2 encoder, 2 x 2 decoder)
    assert norm - base == 6 * 8
    plain = count_parameters(DeepPseudoModel(reference_sized(use_cfer=False)))["total"]
    assert base - plain == 2 * (3 * 256 * 512 + 512) + 2 * (256 * 256 + 256)


def test_learned_positions_add_one_row_per_position():
    sin = count_parameters(DeepPseudoModel(reference_sized()))["total"]
    learned = count_parameters(DeepPseudoModel(reference_sized(positional_encoding="learned")))["total"]
    assert learned - sin == (50 + 60) * 256
