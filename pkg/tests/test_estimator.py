import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from crnet import CRNetLanguageModel

SMALL = dict(n_layers=2, hidden=16, ffn_hidden=24, heads=2, rank=4, seq_len=16, total_steps=8, batch_size=2)


@pytest.fixture(scope="module")
def text(corpus_bytes):
    return corpus_bytes[:20_000].decode("utf-8", errors="ignore")


@pytest.fixture(scope="module")
def fitted(text):
    return CRNetLanguageModel(**SMALL).fit(text)


def test_params_round_trip():
    m = CRNetLanguageModel(**SMALL)
    assert clone(m).get_params() == m.get_params()


def test_unfitted_raises():
    with pytest.raises(NotFittedError):
        CRNetLanguageModel().predict("abc")


def test_fit_sets_attributes(fitted):
    assert fitted.n_steps_ == 8
    assert fitted.config_.ranks == (4,)
    assert len(fitted.history_) == 8


def test_predict_proba_rows(fitted):
    proba = fitted.predict_proba("hello world, this text is longer than one window")
    assert proba.shape == (48, 256)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert fitted.predict(b"abc").shape == (3,)


def test_score_and_perplexity(fitted, text):
    s = fitted.score(text[:300])
    assert s < 0
    assert fitted.perplexity(text[:300]) == pytest.approx(np.exp(-s))
    assert fitted.score("ab") < 0


def test_score_needs_two_bytes(fitted):
    with pytest.raises(ValueError):
        fitted.score("a")


def test_accepts_int_array_and_path(tmp_path, text):
    path = tmp_path / "c.txt"
    path.write_text(text)
    a = CRNetLanguageModel(**SMALL).fit(str(path))
    b = CRNetLanguageModel(**SMALL).fit(np.frombuffer(text.encode(), dtype=np.uint8).astype(int))
    np.testing.assert_array_equal(a.params_.to_vector(), b.params_.to_vector())


def test_full_rank_arch(text):
    m = CRNetLanguageModel(**{**SMALL, "arch": "full_rank", "total_steps": 2}).fit(text)
    assert m.config_.arch == "full_rank"
