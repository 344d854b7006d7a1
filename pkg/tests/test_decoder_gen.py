"""Decoder stack, next-token distributions, beam search and generation."""

import itertools

import numpy as np
import pytest

from deeppseudo import ops
from deeppseudo.attention import AttentionConfig
from deeppseudo.config import ModelConfig
from deeppseudo.corpus import EOS_ID, SOS_ID, SPECIALS, Vocabulary
from deeppseudo.decoding import BeamHypothesis, DecoderLayer, beam_search, greedy_decode
from deeppseudo.gradcheck import check_gradients
from deeppseudo.model import DeepPseudoModel, generate, greedy, search
from deeppseudo.tensor import ConfigError, Parameter, ShapeError, Tensor, default_dtype

N_TOY_MODELS = 50


class ToyModel:
    """Seeded next-token table: every prefix gets its own fixed distribution."""

    def __init__(self, seed: int, vocab: int, sharpness: float):
        self.seed, self.vocab, self.sharpness = seed, vocab, sharpness
        self.calls = 0

    def logp(self, prefix) -> np.ndarray:
        z = np.random.default_rng([self.seed, *prefix]).standard_normal(self.vocab) * self.sharpness
        return z - np.log(np.exp(z - z.max()).sum()) - z.max()

    def __call__(self, prefixes):
        self.calls += 1
        return np.stack([self.logp(p) for p in prefixes])


def exhaustive_best(model: ToyModel, sos: int, eos: int, n_max: int) -> float:
    best = -np.inf
    stack = [([sos], 0.0)]
    while stack:
        prefix, score = stack.pop()
        row = model.logp(prefix)
        for y in range(model.vocab):
            s, ids = score + row[y], prefix + [y]
            if y == eos or len(ids) == n_max:
                best = max(best, s)
            else:
                stack.append((ids, s))
    return best


def toy_cases():
    rng = np.random.default_rng(2024)
    for seed in range(N_TOY_MODELS):
        vocab = int(rng.integers(2, 6))
        n_max = int(rng.integers(2, 5))
        yield seed, vocab, n_max, float(rng.uniform(0.5, 4.0)), int(rng.integers(0, vocab))


TOY = list(toy_cases())


@pytest.mark.parametrize("seed,vocab,n_max,sharp,eos", TOY)
def test_beam_scores_at_least_greedy(seed, vocab, n_max, sharp, eos):
    model = ToyModel(seed, vocab, sharp)
    g = greedy_decode(model, 0, eos, n_max)
    for k in range(1, vocab + 2):
        assert beam_search(model, 0, eos, k, n_max).score >= g.score - 1e-12


@pytest.mark.parametrize("seed,vocab,n_max,sharp,eos", TOY)
def test_beam_is_exact_when_it_holds_every_prefix(seed, vocab, n_max, sharp, eos):
    model = ToyModel(seed, vocab, sharp)
    optimum = exhaustive_best(model, 0, eos, n_max)
    width = vocab ** (n_max - 1)
    assert beam_search(model, 0, eos, width, n_max).score == pytest.approx(optimum, abs=1e-12)
    if n_max <= 3:
        assert beam_search(model, 0, eos, vocab, n_max).score == pytest.approx(optimum, abs=1e-12)


@pytest.mark.parametrize("seed,vocab,n_max,sharp,eos", TOY)
def test_beam_of_one_is_greedy_bitwise(seed, vocab, n_max, sharp, eos):
    model = ToyModel(seed, vocab, sharp)
    assert beam_search(model, 0, eos, 1, n_max) == greedy_decode(model, 0, eos, n_max)


def test_beam_hand_example():
    # step 1 prefers a (0.6) over b (0.4); after a the mass is split, after b it is concentrated
    table = {
        (0,): np.log([1e-9, 0.6, 0.4, 1e-9]),
        (0, 1): np.log([1e-9, 0.3, 0.3, 0.4]),
        (0, 2): np.log([1e-9, 1e-9, 1e-9, 1.0]),
    }

    def step(prefixes):
        return np.stack([table.get(tuple(p), np.log([1e-9, 1e-9, 1e-9, 1.0])) for p in prefixes])

    g = greedy_decode(step, 0, 3, 5)
    b = beam_search(step, 0, 3, 2, 5)
    assert g.ids == [0, 1, 3] and g.score == pytest.approx(np.log(0.24))
    assert b.ids == [0, 2, 3] and b.score == pytest.approx(np.log(0.4))


def test_beam_timeout_appends_eos():
    def step(prefixes):
        return np.tile(np.log([0.05, 0.9, 0.05]), (len(prefixes), 1))

    hyp = beam_search(step, 0, 2, 2, 4)
    assert hyp.ids == [0, 1, 1, 1, 2] and hyp.finished
    assert hyp.score == pytest.approx(3 * np.log(0.9))
    g = greedy_decode(step, 0, 2, 4)
    assert g == hyp


def test_finished_hypotheses_are_not_expanded():
    model = ToyModel(3, 4, 2.0)
    seen = []

    def step(prefixes):
        seen.extend(tuple(p) for p in prefixes)
        return model(prefixes)

    beam_search(step, 0, 1, 3, 5)
    assert not any(1 in p[1:] for p in seen)


def test_beam_argument_errors():
    step = ToyModel(0, 3, 1.0)
    with pytest.raises(ValueError):
        beam_search(step, 0, 1, 0, 5)
    with pytest.raises(ValueError):
        beam_search(step, 0, 1, 2, 1)
    with pytest.raises(ValueError):
        greedy_decode(step, 0, 1, 1)


def test_hypothesis_defaults():
    assert BeamHypothesis(0.0) == BeamHypothesis(0.0, [], False)


# ------------------------------------------------------------------ real decoder


def _vocabs():
    src = Vocabulary.from_list(list(SPECIALS) + [f"c{i}" for i in range(8)])
    tgt = Vocabulary.from_list(list(SPECIALS) + [f"w{i}" for i in range(6)])
    return src, tgt


def tiny_model(variant="self", **kw) -> DeepPseudoModel:
    src, tgt = _vocabs()
    cfg = ModelConfig(src_vocab_size=len(src), tgt_vocab_size=len(tgt), d_model=16, n_heads=2, n_layers=2, d_ff=32,
                      max_src_len=10, max_tgt_len=8, linear_proj_dim=4, norm_gain=3.0, attention=variant,
                      dropout=0.0, **kw)
    return DeepPseudoModel(cfg, dtype=np.float64, src_vocab=src, tgt_vocab=tgt).eval()


@pytest.mark.parametrize("variant", ["self", "linear", "synthesizer", "norm"])
def test_decode_step_is_a_distribution(variant):
    model = tiny_model(variant)
    memory = model.encode(np.array([[4, 5, 6]]))
    logp = model.decode_step(memory, None, [[SOS_ID, 5], [SOS_ID, 7]])
    assert logp.shape == (2, len(model.tgt_vocab))
    np.testing.assert_allclose(np.log(np.exp(logp).sum(-1)), 0.0, atol=1e-12)


@pytest.mark.parametrize("variant", ["self", "linear", "synthesizer", "norm"])
def test_decoder_is_causal(variant):
    model = tiny_model(variant)
    src = np.array([[4, 5, 6, 7]])
    memory = model.encode(src)
    a = model.decode(memory, None, np.array([[SOS_ID, 4, 5, 6, 7]])).data
    b = model.decode(memory, None, np.array([[SOS_ID, 4, 9, 8, 4]])).data
    np.testing.assert_allclose(a[:, :2], b[:, :2], atol=1e-12)
    assert not np.allclose(a[:, 2:], b[:, 2:])


def test_decode_step_equals_last_position_of_full_decode():
    model = tiny_model("norm")
    memory = model.encode(np.array([[4, 5, 6]]))
    full = ops.log_softmax(model.decode(memory, None, np.array([[SOS_ID, 6, 7]]))).data[0, -1]
    np.testing.assert_allclose(model.decode_step(memory, None, [[SOS_ID, 6, 7]])[0], full, atol=1e-12)


@pytest.mark.parametrize("variant", ["self", "norm"])
def test_model_beam_of_one_equals_greedy(variant):
    model = tiny_model(variant)
    for src in ([4, 5], [6, 7, 8, 9, 10], [11]):
        assert search(model, src, k=1) == greedy(model, src)


def test_model_search_respects_target_limit():
    model = tiny_model()
    hyp = search(model, [4, 5], k=3, n_max=50)
    assert len(hyp.ids) <= model.config.max_tgt_len + 1
    assert hyp.ids[0] == SOS_ID and hyp.ids[-1] == EOS_ID


def test_generate_returns_plain_words_and_rejects_empty_lines():
    model = tiny_model()
    text = generate("c1 c2 c3", model, k=2)
    specials = set(SPECIALS)
    assert all(tok not in specials for tok in text.split())
    with pytest.raises(ValueError):
        generate("   ", model)
    bare = DeepPseudoModel(model.config)
    with pytest.raises(ConfigError):
        generate("c1", bare)


def test_decode_rejects_long_prefix():
    model = tiny_model()
    memory = model.encode(np.array([[4, 5]]))
    with pytest.raises(ShapeError):
        model.decode(memory, None, np.ones((1, 9), dtype=np.int64))


def test_generation_is_deterministic_and_restores_mode():
    model = tiny_model()
    model.train()
    first = search(model, [4, 5, 6], k=3)
    assert model.training
    assert search(model, [4, 5, 6], k=3) == first


@pytest.mark.parametrize("variant", ["self", "linear", "synthesizer", "norm"])
def test_decoder_layer_gradients(variant):
    rng = np.random.default_rng(5)
    with default_dtype(np.float64):
        self_cfg = AttentionConfig(variant, 4, 2, proj_dim=3, max_len=6)
        cross_cfg = AttentionConfig(variant, 4, 2, proj_dim=3, max_len=6)
        layer = DecoderLayer(self_cfg, cross_cfg, 8, 0.0, 1, "dec", dtype=np.float64)
        y = Parameter(rng.standard_normal((1, 4, 4)))
        mem = Parameter(rng.standard_normal((1, 5, 4)))

        def f(*_):
            return layer(y, mem, None)

        assert check_gradients(f, [y, mem] + layer.parameters(), rng) < 1e-4


def test_all_prefix_enumeration_size():
    # the exhaustive oracle visits every token sequence that can reach the last step
    model = ToyModel(0, 3, 1.0)
    calls = []
    orig = model.logp
    model.logp = lambda p: calls.append(tuple(p)) or orig(p)
    exhaustive_best(model, 0, 2, 4)
    live = [p for n in range(0, 3) for p in itertools.product([0, 1], repeat=n)]
    assert len(calls) == len(live)


def test_beam_as_wide_as_the_vocabulary_can_miss_the_optimum():
    # tokens a=0, b=1, eos=2; "b b" is pruned at depth two but is the only confident continuation
    tiny = 1e-12
    flat = np.log([1 / 3, 1 / 3, 1 / 3])
    table = {
        (0,): np.log([0.5, 0.5, tiny]),
        (0, 0): np.log([0.5, 0.5, tiny]),
        (0, 1): np.log([0.6, 0.4, tiny]),
        (0, 1, 1): np.log([1.0, tiny, tiny]),
    }

    def step(prefixes):
        return np.stack([table.get(tuple(p), flat) for p in prefixes])

    narrow = beam_search(step, 0, 2, 3, 4)
    wide = beam_search(step, 0, 2, 9, 4)
    assert narrow.score == pytest.approx(np.log(0.3 / 3))
    assert wide.ids == [0, 1, 1, 0, 2] and wide.score == pytest.approx(np.log(0.2))
