"""scikit-learn style estimator API and input validation."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from deeppseudo import CodeTokenizer, PseudoCodeGenerator
from deeppseudo.validation import check_aligned, check_fraction, check_lines, check_positive_int


def toy_lines(toy_corpus_dir):
    code = (toy_corpus_dir / "code.txt").read_text().splitlines()
    anno = (toy_corpus_dir / "anno.txt").read_text().splitlines()
    return code, anno


def test_tokenizer_transform():
    tok = CodeTokenizer()
    assert tok.fit_transform(["x = 1", ""]) == [["x", "=", "<NUM>"], []]
    assert CodeTokenizer(join=True).fit_transform(np.array(["return foo_bar"])) == ["return foo bar"]
    assert tok.get_params() == {"join": False}
    assert clone(CodeTokenizer(join=True)).join is True


def test_generator_params_round_trip():
    est = PseudoCodeGenerator(d_model=32, epochs=3)
    params = est.get_params()
    assert params["d_model"] == 32 and params["epochs"] == 3 and params["attention"] == "norm"
    est.set_params(beam_size=5)
    assert clone(est).get_params() == est.get_params()


def test_predict_before_fit():
    with pytest.raises(NotFittedError):
        PseudoCodeGenerator().predict(["x = 1"])


def test_fit_predict_score(toy_corpus_dir):
    code, anno = toy_lines(toy_corpus_dir)
    est = PseudoCodeGenerator(d_model=32, n_heads=4, n_layers=1, epochs=40, dropout=0.0, patience=None,
                              min_frequency=1, valid_fraction=0.0, random_state=0)
    assert est.fit(code[:32], anno[:32]) is est
    assert len(est.history_) == 40
    preds = est.predict(code[:32] + [" "])
    assert len(preds) == 33 and preds[-1] == ""
    assert all(isinstance(p, str) for p in preds)
    assert 0.3 < est.score(code[:32], anno[:32]) <= 1.0


def test_fit_is_deterministic(toy_corpus_dir):
    code, anno = toy_lines(toy_corpus_dir)
    kw = dict(d_model=16, n_heads=2, n_layers=1, epochs=2, min_frequency=1, random_state=3)
    a = PseudoCodeGenerator(**kw).fit(code[:20], anno[:20])
    b = PseudoCodeGenerator(**kw).fit(code[:20], anno[:20])
    for name, arr in a.checkpoint_.params.items():
        np.testing.assert_array_equal(arr, b.checkpoint_.params[name])


def test_fit_input_errors(toy_corpus_dir):
    code, anno = toy_lines(toy_corpus_dir)
    est = PseudoCodeGenerator(epochs=1)
    with pytest.raises(ValueError):
        est.fit(code[:5], anno[:4])
    with pytest.raises(TypeError):
        est.fit("x = 1", "set x to 1")
    with pytest.raises(ValueError):
        PseudoCodeGenerator(valid_fraction=1.0).fit(code[:5], anno[:5])
    with pytest.raises(ValueError):
        PseudoCodeGenerator(beam_size=0).fit(code[:5], anno[:5])


def test_validation_helpers():
    assert check_lines(("a", "b")) == ["a", "b"]
    assert check_lines(np.array([["a"], ["b"]])) == ["a", "b"]
    with pytest.raises(TypeError):
        check_lines("abc")
    with pytest.raises(TypeError):
        check_lines([1, 2])
    with pytest.raises(ValueError):
        check_lines([])
    with pytest.raises(ValueError):
        check_lines(["a", "  "])
    assert check_lines(["a", ""], allow_empty_lines=True) == ["a", ""]
    with pytest.raises(ValueError):
        check_lines(np.array([["a", "b"]]))
    with pytest.raises(ValueError):
        check_aligned([1], [1, 2])
    assert check_fraction(0, "f") == 0.0
    with pytest.raises(ValueError):
        check_fraction(0, "f", low_open=True)
    assert check_positive_int(3.0, "n") == 3
    for bad in (0, 2.5, True):
        with pytest.raises(ValueError):
            check_positive_int(bad, "n")
