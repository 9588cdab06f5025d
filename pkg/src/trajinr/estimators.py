"""scikit-learn style wrappers around the INR fitter and the weight-space classifier."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import diffcore as dc
from .inr import InrArchitecture, InrParams, Scan, build_inr, finetune_subject, normalize_age, predict
from .weightspace import StreamMatrix, parse_selection, predict_logits, stack_stream_params, \
    train_classifier


def _as_rng(random_state) -> np.random.Generator:
    if isinstance(random_state, np.random.Generator):
        return random_state
    return np.random.default_rng(random_state)


def check_coordinates(X) -> np.ndarray:
    """Validate an ``(N, 4)`` array of ``[x, y, z, age]`` rows."""
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 4:
        raise ValueError(f"expected 4 columns [x, y, z, age], got {X.shape[1]}")
    return X


def check_stream_matrices(X) -> np.ndarray:
    """Stack a sequence of equally shaped stream matrices into ``(n, rows, width)``."""
    mats = [m.values if isinstance(m, StreamMatrix) else np.asarray(m, dtype=np.float64) for m in X]
    if not mats:
        raise ValueError("need at least one stream matrix")
    shape = mats[0].shape
    for m in mats:
        if m.ndim != 2 or m.shape != shape:
            raise ValueError(f"stream matrices must share one 2-D shape, got {m.shape} and {shape}")
        if not np.all(np.isfinite(m)):
            raise ValueError("stream matrices contain NaN or infinity")
    return np.stack(mats)


class SpatiotemporalINR(RegressorMixin, BaseEstimator):
    """Fit one subject's scans with the semi-disentangled INR.

    ``X`` rows are ``[x, y, z, age]`` with coordinates in [-1, 1] and age in
    years; rows sharing an age form one scan. ``init_params`` plays the role
    of a shared pretrained initialization; without it a fresh network is drawn.
    """

    def __init__(self, hidden=64, space_layers=5, time_layers=5, combined_layers=3, omega0=20.0, s0=10.0,
                 mode="real", iterations=300, voxel_fraction=0.01, lr=5e-4, lr_floor=0.05,
                 lift_gain=0.5, init_params=None, random_state=None):
        self.hidden = hidden
        self.space_layers = space_layers
        self.time_layers = time_layers
        self.combined_layers = combined_layers
        self.omega0 = omega0
        self.s0 = s0
        self.mode = mode
        self.iterations = iterations
        self.voxel_fraction = voxel_fraction
        self.lr = lr
        self.lr_floor = lr_floor
        self.lift_gain = lift_gain
        self.init_params = init_params
        self.random_state = random_state

    def _arch(self) -> InrArchitecture:
        return InrArchitecture(self.hidden, self.space_layers, self.time_layers, self.combined_layers,
                               self.omega0, self.s0, self.mode)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        X = check_coordinates(X)
        if not 0 < self.voxel_fraction <= 1:
            raise ValueError(f"voxel_fraction must lie in (0, 1], got {self.voxel_fraction}")
        rng = _as_rng(self.random_state)
        arch = self._arch()
        if self.init_params is not None:
            if self.init_params.arch != arch:
                raise ValueError(f"init_params architecture {self.init_params.arch} differs from {arch}")
            start = self.init_params
        else:
            start = build_inr(arch, rng, lift_gain=self.lift_gain)
        scans = []
        for age in np.unique(X[:, 3]):
            rows = X[:, 3] == age
            scans.append(Scan(X[rows, :3].astype(np.float32), y[rows].astype(np.float32), float(age)))
        res = finetune_subject(start, scans, rng, self.iterations, self.voxel_fraction, self.lr, self.lr_floor)
        self.params_: InrParams = res.params
        self.loss_curve_ = res.losses
        self.training_ages_ = [s.age for s in scans]
        self.n_features_in_ = 4
        return self

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_coordinates(X)
        return predict(self.params_, X[:, :3], normalize_age(X[:, 3])).astype(np.float64)


class StreamStacker(TransformerMixin, BaseEstimator):
    """Turn fitted ``InrParams`` into stacked stream matrices ``(n, rows, hidden)``."""

    def __init__(self, selection="t"):
        self.selection = selection

    def fit(self, X=None, y=None):
        self.selection_ = parse_selection(self.selection)
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "selection_")
        items = list(X)
        for p in items:
            if not isinstance(p, InrParams):
                raise TypeError(f"expected InrParams, got {type(p).__name__}")
        return np.stack([stack_stream_params(p, self.selection_).values for p in items])


class WeightSpaceClassifier(ClassifierMixin, BaseEstimator):
    """Permutation-invariant row-wise encoder with a binary logistic head."""

    def __init__(self, widths=(128, 256, 512), head_hidden=64, dropout=0.2, epochs=100, batch_size=8,
                 lr=1e-3, random_state=None):
        self.widths = widths
        self.head_hidden = head_hidden
        self.dropout = dropout
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y):
        X = check_stream_matrices(X)
        y = np.asarray(y)
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ValueError(f"{X.shape[0]} samples but labels of shape {y.shape}")
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError(f"binary labels required, got classes {self.classes_.tolist()}")
        codes = (y == self.classes_[1]).astype(np.int64)
        self.model_, self.history_ = train_classifier(
            list(X), codes, _as_rng(self.random_state), self.epochs, self.batch_size, self.lr,
            self.widths, self.head_hidden, self.dropout)
        self.n_features_in_ = X.shape[2]
        return self

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_stream_matrices(X)
        if X.shape[2] != self.n_features_in_:
            raise ValueError(f"matrix width {X.shape[2]} differs from fitted width {self.n_features_in_}")
        return predict_logits(self.model_, list(X))

    def predict_proba(self, X) -> np.ndarray:
        p = dc.sigmoid(self.decision_function(X))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[(self.decision_function(X) > 0).astype(int)]
