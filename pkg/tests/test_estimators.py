import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from trajinr.estimators import (SpatiotemporalINR, StreamStacker, WeightSpaceClassifier, check_coordinates,
                                check_stream_matrices)
from trajinr.inr import InrArchitecture, build_inr
from trajinr.weightspace import StreamMatrix

SMALL = dict(hidden=6, space_layers=2, time_layers=2, combined_layers=1)


def _coords(n_scans=3, n=40, seed=0):
    rng = np.random.default_rng(seed)
    xyz = rng.uniform(-1, 1, (n, 3))
    X = np.vstack([np.column_stack([xyz, np.full(n, 50.0 + 6 * k)]) for k in range(n_scans)])
    y = np.tanh(X[:, 0] + 0.02 * (X[:, 3] - 50))
    return X, y


class TestValidation:
    def test_coordinates(self):
        with pytest.raises(ValueError):
            check_coordinates(np.zeros((5, 3)))
        with pytest.raises(ValueError):
            check_coordinates([[0, 0, 0, np.nan]])
        assert check_coordinates([[0, 0, 0, 60]]).dtype == np.float64

    def test_stream_matrices(self):
        out = check_stream_matrices([np.zeros((3, 2)), StreamMatrix(np.ones((3, 2)), ("time",))])
        assert out.shape == (2, 3, 2)
        with pytest.raises(ValueError):
            check_stream_matrices([np.zeros((3, 2)), np.zeros((4, 2))])
        with pytest.raises(ValueError):
            check_stream_matrices([np.full((2, 2), np.inf)])
        with pytest.raises(ValueError):
            check_stream_matrices([])


class TestSpatiotemporalINR:
    def test_params_and_clone(self):
        est = SpatiotemporalINR(hidden=8, iterations=5, random_state=3)
        p = est.get_params()
        assert p["hidden"] == 8 and p["iterations"] == 5 and p["random_state"] == 3
        c = clone(est)
        assert c.get_params() == p and c is not est

    def test_fit_predict(self):
        X, y = _coords()
        est = SpatiotemporalINR(**SMALL, iterations=30, voxel_fraction=0.5, lr=5e-3, random_state=0).fit(X, y)
        assert est.training_ages_ == [50.0, 56.0, 62.0]
        assert len(est.loss_curve_) == 30
        pred = est.predict(X)
        assert pred.shape == y.shape and np.all(np.isfinite(pred))
        assert np.mean(est.loss_curve_[-5:]) < np.mean(est.loss_curve_[:5])

    def test_seeded(self):
        X, y = _coords()
        kw = dict(**SMALL, iterations=3, random_state=1)
        a = SpatiotemporalINR(**kw).fit(X, y).predict(X)
        b = SpatiotemporalINR(**kw).fit(X, y).predict(X)
        assert np.array_equal(a, b)

    def test_init_params(self):
        X, y = _coords()
        arch = InrArchitecture(**SMALL)
        theta = build_inr(arch, np.random.default_rng(0))
        est = SpatiotemporalINR(**SMALL, iterations=2, init_params=theta, random_state=0).fit(X, y)
        assert est.params_.arch == arch
        with pytest.raises(ValueError):
            SpatiotemporalINR(hidden=7, space_layers=2, time_layers=2, combined_layers=1,
                              init_params=theta).fit(X, y)

    def test_errors(self):
        X, y = _coords()
        with pytest.raises(NotFittedError):
            SpatiotemporalINR().predict(X)
        with pytest.raises(ValueError):
            SpatiotemporalINR(**SMALL, voxel_fraction=0).fit(X, y)
        with pytest.raises(ValueError):
            SpatiotemporalINR(**SMALL).fit(X[:, :3], y)
        with pytest.raises(ValueError):
            SpatiotemporalINR(**SMALL).fit(X, y[:-1])


class TestStreamStacker:
    def test_transform(self):
        arch = InrArchitecture(**SMALL)
        inrs = [build_inr(arch, np.random.default_rng(s)) for s in range(3)]
        out = StreamStacker("t+c").fit_transform(inrs)
        assert out.shape == (3, 2 + 7 + 13, 6)
        with pytest.raises(TypeError):
            StreamStacker().fit().transform([np.zeros((2, 2))])
        with pytest.raises(NotFittedError):
            StreamStacker().transform(inrs)


class TestWeightSpaceClassifier:
    def _data(self, n=12):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(n, 10, 5))
        y = np.array(["healthy", "ad_like"] * (n // 2))
        X[y == "ad_like", 0, 0] += 8.0
        return X, y

    def test_fit_predict(self):
        X, y = self._data()
        clf = WeightSpaceClassifier(widths=(6, 8, 10), head_hidden=4, epochs=40, batch_size=4, random_state=0)
        clf.fit(X, y)
        assert list(clf.classes_) == ["ad_like", "healthy"]
        assert len(clf.history_.loss) == 40
        proba = clf.predict_proba(X)
        assert proba.shape == (12, 2) and np.allclose(proba.sum(axis=1), 1.0)
        assert set(clf.predict(X)) <= set(clf.classes_)
        assert clf.score(X, y) >= 0.9

    def test_clone_and_params(self):
        clf = WeightSpaceClassifier(epochs=3)
        assert clone(clf).get_params()["epochs"] == 3

    def test_errors(self):
        X, y = self._data()
        with pytest.raises(ValueError):
            WeightSpaceClassifier(epochs=1).fit(X, np.zeros(12))
        with pytest.raises(ValueError):
            WeightSpaceClassifier(epochs=1).fit(X, y[:5])
        clf = WeightSpaceClassifier(widths=(6, 8, 10), head_hidden=4, epochs=1, random_state=0).fit(X, y)
        with pytest.raises(ValueError):
            clf.predict(np.zeros((2, 10, 4)))
        with pytest.raises(NotFittedError):
            WeightSpaceClassifier().predict(X)
