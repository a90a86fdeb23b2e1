"""scikit-learn compatible wrappers around the learners and the policy trainer."""
from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ValidationError
from .learners import TrainConfig, fit_cost_sensitive, fit_weighted_binary
from .policy import OverheadSpec, train_bottom_up
from .runtime import evaluate_dataset, simulate
from .traces import TraceDataset


def check_trace_dataset(X) -> TraceDataset:
    if not isinstance(X, TraceDataset):
        raise TypeError(f"expected a TraceDataset, got {type(X).__name__}")
    return X


def check_cost_matrix(X, C):
    X = check_array(X, ensure_2d=True)
    C = check_array(C, ensure_2d=True)
    if len(X) != len(C):
        raise ValueError(f"X has {len(X)} rows but C has {len(C)}")
    if C.shape[1] < 2:
        raise ValueError("cost matrix needs at least two columns (actions)")
    return X, C


class _TrainParams:
    def _train_config(self):
        return TrainConfig(learning_rate=self.learning_rate, max_epochs=self.max_epochs, tol=self.tol, l2=self.l2)


class WeightedLogisticClassifier(_TrainParams, ClassifierMixin, BaseEstimator):
    """Binary linear-logistic classifier trained with per-sample importances.

    Parameters
    ----------
    learning_rate : float
        Initial gradient step; the line search adapts it.
    max_epochs : int
        Maximum number of full-batch gradient steps.
    tol : float
        Stop once an epoch lowers the risk by less than ``tol`` (relative).
    l2 : float
        Ridge penalty on the standardized weights.

    Attributes
    ----------
    classes_ : ndarray of shape (2,)
    coef_ : ndarray of shape (n_features,)
        Weights in the original feature units.
    intercept_ : float
    model_ : LinearModel
    """

    def __init__(self, learning_rate=1.0, max_epochs=500, tol=1e-8, l2=1e-4):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.tol = tol
        self.l2 = l2

    def fit(self, X, y, sample_weight=None):
        X, y = check_X_y(X, y)
        self.classes_ = np.unique(y)
        if len(self.classes_) != 2:
            raise ValueError(f"need exactly 2 classes, got {len(self.classes_)}")
        signed = np.where(y == self.classes_[1], 1.0, -1.0)
        w = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        self.model_ = fit_weighted_binary(X, signed, w, self._train_config())
        std = self.model_.standardizer
        self.coef_ = self.model_.weights / std.scale
        self.intercept_ = float(self.model_.bias - self.coef_ @ std.mean)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.score(check_array(X))

    def predict_proba(self, X):
        p = expit(self.decision_function(X))
        return np.column_stack([1 - p, p])

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[(scores > 0).astype(int)]


class CostSensitiveLinearClassifier(_TrainParams, BaseEstimator):
    """Linear scorer per action minimizing the softmax-smoothed expected cost.

    ``fit(X, C)`` takes a cost matrix with one column per action; ``predict``
    returns the column index of the chosen action.
    """

    def __init__(self, learning_rate=1.0, max_epochs=500, tol=1e-8, l2=1e-4):
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.tol = tol
        self.l2 = l2

    def fit(self, X, C):
        X, C = check_cost_matrix(X, C)
        self.model_ = fit_cost_sensitive(X, C, self._train_config())
        self.n_actions_ = C.shape[1]
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.scores(check_array(X))

    def predict(self, X):
        return np.argmax(self.decision_function(X), axis=1)

    def expected_cost(self, X, C):
        X, C = check_cost_matrix(X, C)
        return float(C[np.arange(len(C)), self.predict(X)].mean())


class CascadePolicyEstimator(_TrainParams, BaseEstimator):
    """Adaptive cascade policy as an estimator over :class:`TraceDataset` inputs.

    ``fit`` trains every decision node bottom-up for the trade-off ``lam``;
    ``predict`` returns each example's exit stage; ``score`` is the negative
    routed risk ``-(mean time + lam * excess error)``.
    """

    def __init__(self, lam=1.0, overhead_linear=None, overhead_fraction=0.08,
                 learning_rate=1.0, max_epochs=500, tol=1e-8, l2=1e-4):
        self.lam = lam
        self.overhead_linear = overhead_linear
        self.overhead_fraction = overhead_fraction
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.tol = tol
        self.l2 = l2

    def fit(self, X, y=None):
        X = check_trace_dataset(X)
        if self.lam < 0:
            raise ValidationError("lam must be >= 0")
        overhead = OverheadSpec(default=self.overhead_linear, fraction=self.overhead_fraction)
        self.policy_ = train_bottom_up(X, self.lam, overhead, self._train_config())
        return self

    def predict(self, X):
        check_is_fitted(self, "policy_")
        X = check_trace_dataset(X)
        sim = simulate(self.policy_, X)
        return np.asarray(X.topology.stages, dtype=object)[sim.exit_index]

    def evaluate(self, X):
        check_is_fitted(self, "policy_")
        return evaluate_dataset(self.policy_, check_trace_dataset(X))

    def score(self, X, y=None):
        m = self.evaluate(X)
        return -(m.mean_time + self.lam * m.excess_error)
