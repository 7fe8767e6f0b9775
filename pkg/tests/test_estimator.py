import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from spherelm import SphereFlowLM
from spherelm._validation import check_clean_mask, check_tokens
from spherelm.exceptions import EmptyInput, IndexOutOfRange, ShapeMismatch
from spherelm.schedule import truncation_bound
from spherelm.tasks import copy_task

SMALL = dict(dim=16, n_layers=1, n_heads=2, cond_dim=8, steps=20, batch_size=4, sample_steps=4)


@pytest.fixture
def data():
    return copy_task(6, 5, np.random.default_rng(0), 24)


def test_params_roundtrip():
    est = SphereFlowLM(**SMALL)
    assert clone(est).get_params() == est.get_params()
    est.set_params(lr=1e-2)
    assert est.lr == 1e-2


def test_fit_predict(data):
    x, mask = data
    est = SphereFlowLM(vocab_size=5, **SMALL).fit(x, mask)
    assert est.n_steps_ == 20
    pred = est.predict(x[:3], mask[:3])
    assert pred.shape == (3, 6)
    np.testing.assert_array_equal(pred[:, :3], x[:3, :3])
    assert 0.0 <= est.score(x[:3], mask[:3]) <= 1.0


def test_auto_truncation(data):
    x, mask = data
    est = SphereFlowLM(vocab_size=5, **SMALL).fit(x, mask)
    assert est.schedule_.a_max == pytest.approx(truncation_bound(0.1, 5, 16))
    none = SphereFlowLM(vocab_size=5, truncation=None, **SMALL).fit(x, mask)
    assert none.schedule_.a_max == 1.0
    fixed = SphereFlowLM(vocab_size=5, truncation=0.8, **SMALL).fit(x, mask)
    assert fixed.schedule_.a_max == 0.8


def test_vocab_inferred(data):
    x, mask = data
    est = SphereFlowLM(**SMALL).fit(x, mask)
    assert est.vocab_size_ == int(x.max()) + 1


def test_sample_and_transform(data):
    x, mask = data
    est = SphereFlowLM(vocab_size=5, **SMALL).fit(x, mask)
    s = est.sample(3, seed=1)
    assert s.shape == (3, 6)
    np.testing.assert_array_equal(s, est.sample(3, seed=1))
    emb = est.transform(x[:2])
    np.testing.assert_allclose(np.linalg.norm(emb, axis=-1), 1.0, atol=1e-12)
    assert est.last_report_["nfe"] == 5


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SphereFlowLM().predict([[0, 1]])


def test_reproducible(data):
    x, mask = data
    a = SphereFlowLM(vocab_size=5, random_state=3, **SMALL).fit(x, mask)
    b = SphereFlowLM(vocab_size=5, random_state=3, **SMALL).fit(x, mask)
    np.testing.assert_array_equal(a.codebook_.table, b.codebook_.table)


class TestValidation:
    def test_tokens(self):
        assert check_tokens([[1, 2], [3, 0]]).dtype == np.int64
        assert check_tokens([[1.0, 2.0]]).tolist() == [[1, 2]]
        with pytest.raises(IndexOutOfRange):
            check_tokens([[1.5, 2.0]])
        with pytest.raises(IndexOutOfRange):
            check_tokens([[1, -1]])
        with pytest.raises(IndexOutOfRange):
            check_tokens([[1, 5]], vocab_size=5)
        with pytest.raises(EmptyInput):
            check_tokens([])
        with pytest.raises(ValueError):
            check_tokens([[1, np.nan]])

    def test_mask(self):
        assert check_clean_mask(None, (2, 3)).shape == (2, 3)
        np.testing.assert_array_equal(check_clean_mask([1, 0, 0], (2, 3))[1], [True, False, False])
        with pytest.raises(ShapeMismatch):
            check_clean_mask([True, False], (2, 3))
        with pytest.raises(ShapeMismatch):
            check_clean_mask([2, 0, 0], (2, 3))
