import numpy as np
import pytest
from sklearn.base import clone

from rsmi.estimator import RSMIClassifier, baseline_classifier
from rsmi.numerics import RngStream
from rsmi.textdata import gen_synthetic


@pytest.fixture(scope="module")
def corpus():
    return gen_synthetic(1, 2000, 500, 200)


@pytest.fixture(scope="module")
def tiny():
    c = gen_synthetic(4, 200, 40, 60)
    X = [e.tokens for e in c.train]
    y = [e.label for e in c.train]
    Xt = [e.tokens for e in c.test]
    return X, y, Xt, np.array([e.label for e in c.test])


def small(**kw):
    opts = dict(d_model=8, n_blocks=1, d_ff=16, epochs=1, k1=10, vocab_size=60)
    opts.update(kw)
    return RSMIClassifier(**opts)


class TestParams:
    def test_get_set_clone(self):
        clf = small(sigma=0.2)
        assert clf.get_params()["sigma"] == 0.2
        clf.set_params(M=3)
        assert clone(clf).get_params()["M"] == 3

    def test_baseline(self):
        p = baseline_classifier().get_params()
        assert (p["sigma"], p["M"], p["beta"], p["inference"]) == (0.0, 0, 0.0, "plain")

    @pytest.mark.parametrize("kw", [dict(inference="x"), dict(sigma=-1.0), dict(M=3, N=2),
                                    dict(batch_size=0), dict(nu=0)])
    def test_invalid(self, tiny, kw):
        X, y, _, _ = tiny
        with pytest.raises(ValueError):
            small(**kw).fit(X, y)

    def test_bad_inputs(self, tiny):
        X, y, _, _ = tiny
        with pytest.raises(ValueError):
            small().fit(X, y[:-1])
        with pytest.raises(ValueError):
            small().fit([[]], [0])
        with pytest.raises(ValueError):
            small().fit([[70]], [0])

    def test_not_fitted(self):
        from sklearn.exceptions import NotFittedError
        with pytest.raises(NotFittedError):
            small().predict([[4]])


class TestFitPredict:
    def test_shapes_and_modes(self, tiny):
        X, y, Xt, yt = tiny
        clf = small().fit(X, y)
        assert clf.n_iter_ == len(clf.loss_curve_) == 7
        for mode in ("logit_average", "majority", "plain", "gm", "rm"):
            clf.set_params(inference=mode)
            proba = clf.predict_proba(Xt)
            assert proba.shape == (len(Xt), 2)
            np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-9)
            assert len(clf.last_forward_passes_) == len(Xt)

    def test_padded_array_input(self, tiny):
        X, y, Xt, _ = tiny
        clf = small(sigma=0.0).fit(X, y)
        width = max(map(len, Xt))
        arr = np.array([list(s) + [0] * (width - len(s)) for s in Xt])
        assert np.array_equal(clf.predict_proba(arr), clf.predict_proba(Xt))

    def test_training_is_byte_identical(self, tiny):
        X, y, _, _ = tiny
        a = small().fit(X, y)
        b = small().fit(X, y)
        for k in a.params_:
            assert a.params_[k].tobytes() == b.params_[k].tobytes()
        c = small(random_state=1).fit(X, y)
        assert a.params_["embed"].tobytes() != c.params_["embed"].tobytes()

    def test_save_load(self, tiny, tmp_path):
        X, y, Xt, _ = tiny
        clf = small().fit(X, y)
        clf.save(tmp_path / "m.rsmi")
        other = small().load(tmp_path / "m.rsmi")
        s = RngStream(0)
        assert np.array_equal(clf.predict_proba(Xt, s), other.predict_proba(Xt, s))

    def test_oracle_counts(self, tiny):
        X, y, Xt, _ = tiny
        clf = small(k0=3, k1=5).fit(X, y)
        q = clf.oracle(RngStream(2, 7))
        q(Xt[:4])
        q(Xt[:2])
        assert q.counter["queries"] == 6
        assert q.counter["forward_passes"] >= 6 * (1 + 1 + 3)
        again = clf.oracle(RngStream(2, 7))
        assert np.array_equal(again(Xt[:4]), clf.oracle(RngStream(2, 7))(Xt[:4]))

    def test_loss_decreases(self, corpus):
        X = [e.tokens for e in corpus.train[:1600]]
        y = [e.label for e in corpus.train[:1600]]
        clf = RSMIClassifier(vocab_size=200, epochs=4, random_state=0).fit(X, y)
        curve = np.array(clf.loss_curve_)
        assert clf.n_iter_ == 200
        assert curve[-20:].mean() <= 0.5 * curve[0]
