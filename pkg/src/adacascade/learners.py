"""Importance-weighted binary and cost-sensitive multi-action linear learners.

Both learners standardize features (weighted by how much each sample
matters), start from zero parameters and run full-batch gradient descent with
a backtracking line search, so training is deterministic and the recorded
risk sequence never increases.

Binary objective, labels in {-1, +1}::

    (1/n) sum_i v_i log(1 + exp(-y_i s_i)) + l2/2 |w|^2

Multi-action objective, smoothed expected cost::

    (1/n) sum_i sum_a c_ia softmax_a(s_i) + l2/2 |W|^2

Training rescales importances (and shifts/rescales costs) so that neither
multiplying all weights by a constant nor adding zero-weight samples changes
the learned decisions.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit, log_expit, softmax

from .exceptions import AllZeroImportance, DimensionMismatch, EmptyGrid, InconsistentActionSets, ValidationError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1.0
    max_epochs: int = 500
    tol: float = 1e-8
    l2: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if not (self.learning_rate > 0 and self.tol > 0 and self.max_epochs >= 1 and self.l2 >= 0):
            raise ValidationError("learning_rate, tol > 0; max_epochs >= 1; l2 >= 0 required")

    def to_dict(self):
        return {"learning_rate": self.learning_rate, "max_epochs": self.max_epochs,
                "tol": self.tol, "l2": self.l2, "seed": self.seed}


@dataclass(frozen=True, eq=False)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, X, weights=None):
        X = np.asarray(X, dtype=float)
        w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
        if w.sum() <= 0:
            w = np.ones(len(X))
        mean = np.average(X, axis=0, weights=w)
        var = np.average((X - mean) ** 2, axis=0, weights=w)
        scale = np.sqrt(var)
        scale[~(scale > 1e-12)] = 1.0
        return cls(mean, scale)

    @classmethod
    def identity(cls, dim):
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.scale

    def to_dict(self):
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=float), np.asarray(d["scale"], dtype=float))


@dataclass(frozen=True, eq=False)
class LinearModel:
    """``score(x) = w . standardize(x) + b``; positive scores pick ``action_order[1]``."""

    weights: np.ndarray
    bias: float
    standardizer: Standardizer
    action_order: tuple = ()
    risk_history: tuple = field(default=(), repr=False)

    @property
    def dim(self):
        return len(self.weights)

    def score(self, X):
        X = _as_2d(X, self.dim)
        return self.standardizer.transform(X) @ self.weights + self.bias

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "bias": float(self.bias),
            "standardizer": self.standardizer.to_dict(),
            "action_order": list(self.action_order),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=float), float(d["bias"]),
                   Standardizer.from_dict(d["standardizer"]), tuple(d.get("action_order", ())))


@dataclass(frozen=True, eq=False)
class MultiActionModel:
    """One linear scorer per action over a shared standardizer; highest score wins."""

    weights: np.ndarray  # (n_actions, dim)
    bias: np.ndarray  # (n_actions,)
    standardizer: Standardizer
    action_order: tuple = ()
    risk_history: tuple = field(default=(), repr=False)

    @property
    def dim(self):
        return self.weights.shape[1]

    def scores(self, X):
        X = _as_2d(X, self.dim)
        return self.standardizer.transform(X) @ self.weights.T + self.bias

    def decide(self, X):
        # argmax returns the first maximum, i.e. the lower action index on ties
        return np.argmax(self.scores(X), axis=1)

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "bias": self.bias.tolist(),
            "standardizer": self.standardizer.to_dict(),
            "action_order": list(self.action_order),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["weights"], dtype=float).reshape(len(d["bias"]), -1),
                   np.asarray(d["bias"], dtype=float), Standardizer.from_dict(d["standardizer"]),
                   tuple(d.get("action_order", ())))


@dataclass(frozen=True)
class WeightedBinarySample:
    features: Sequence[float]
    pseudo_label: int
    importance: float

    def __post_init__(self):
        if self.pseudo_label not in (-1, 1):
            raise ValidationError("pseudo_label must be -1 or +1")
        if not (np.isfinite(self.importance) and self.importance >= 0):
            raise ValidationError("importance must be finite and >= 0")


@dataclass(frozen=True)
class ActionCostVector:
    features: Sequence[float]
    costs: Mapping[str, float]

    def __post_init__(self):
        if not self.costs:
            raise ValidationError("cost vector needs at least one action")
        if not all(np.isfinite(v) for v in self.costs.values()):
            raise ValidationError("action costs must be finite")


def _as_2d(X, dim):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != dim:
        raise DimensionMismatch(f"expected {dim} features, got shape {X.shape}")
    return X


# ---------------------------------------------------------------------------
# objectives: value and gradient w.r.t. the flat parameter vector


def logistic_objective(params, Z, y, v, l2):
    w, b = params[:-1], params[-1]
    s = Z @ w + b
    n = len(y)
    value = -(v @ log_expit(y * s)) / n + 0.5 * l2 * (w @ w)
    gs = -v * y * expit(-y * s) / n
    grad = np.empty_like(params)
    grad[:-1] = Z.T @ gs + l2 * w
    grad[-1] = gs.sum()
    return value, grad


def expected_cost_objective(params, Z, C, l2):
    n, A = C.shape
    d = Z.shape[1]
    W = params[: A * d].reshape(A, d)
    b = params[A * d:]
    P = softmax(Z @ W.T + b, axis=1)
    expected = (C * P).sum(axis=1)
    value = expected.sum() / n + 0.5 * l2 * np.sum(W * W)
    G = P * (C - expected[:, None]) / n
    grad = np.concatenate([(G.T @ Z + l2 * W).ravel(), G.sum(axis=0)])
    return value, grad


def minimize_backtracking(fun, x0, config: TrainConfig):
    """Gradient descent with Armijo backtracking. Returns (x, risk history)."""
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    history = [f]
    step = config.learning_rate
    for _ in range(config.max_epochs):
        gg = g @ g
        if gg == 0.0:
            break
        while True:
            xn = x - step * g
            fn, gn = fun(xn)
            if fn <= f - 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-16:
                return x, tuple(history)
        decrease = f - fn
        x, f, g = xn, fn, gn
        history.append(f)
        if decrease <= config.tol * max(1.0, abs(f)):
            break
        step = min(step * 2.0, 1e6)
    return x, tuple(history)


# ---------------------------------------------------------------------------
# training


def fit_weighted_binary(X, y, importance, config: TrainConfig = TrainConfig(), action_order=()) -> LinearModel:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    v = np.asarray(importance, dtype=float)
    if X.ndim != 2 or len(X) != len(y) or len(y) != len(v):
        raise DimensionMismatch("features, labels and importances must align")
    if len(y) == 0 or not np.any(v > 0):
        raise AllZeroImportance("at least one sample needs positive importance")
    if not np.all(np.isin(y, (-1.0, 1.0))):
        raise ValidationError("pseudo labels must be -1 or +1")
    std = Standardizer.fit(X, v)
    Z = std.transform(X)
    v = v * (len(v) / v.sum())
    params, hist = minimize_backtracking(
        lambda p: logistic_objective(p, Z, y, v, config.l2), np.zeros(X.shape[1] + 1), config
    )
    return LinearModel(params[:-1].copy(), float(params[-1]), std, tuple(action_order), hist)


def train_weighted_binary(samples: Sequence[WeightedBinarySample], config: TrainConfig = TrainConfig()) -> LinearModel:
    if not samples:
        raise AllZeroImportance("no samples")
    dims = {len(s.features) for s in samples}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent feature dimensions {sorted(dims)}")
    X = np.array([s.features for s in samples], dtype=float)
    y = np.array([s.pseudo_label for s in samples], dtype=float)
    v = np.array([s.importance for s in samples], dtype=float)
    return fit_weighted_binary(X, y, v, config)


def fit_cost_sensitive(X, C, config: TrainConfig = TrainConfig(), action_order=()) -> MultiActionModel:
    X = np.asarray(X, dtype=float)
    C = np.asarray(C, dtype=float)
    if X.ndim != 2 or C.ndim != 2 or len(X) != len(C):
        raise DimensionMismatch("features and cost matrix must align")
    if C.shape[1] < 2:
        raise InconsistentActionSets("cost-sensitive learning needs at least two actions")
    n, A = C.shape
    d = X.shape[1]
    Cs = C - C.min(axis=1, keepdims=True)
    spread = Cs.max(axis=1)
    scale = spread.mean()
    std = Standardizer.fit(X, spread if scale > 0 else None)
    if scale == 0:
        return MultiActionModel(np.zeros((A, d)), np.zeros(A), std, tuple(action_order), (0.0,))
    Z = std.transform(X)
    Cs = Cs / scale
    params, hist = minimize_backtracking(
        lambda p: expected_cost_objective(p, Z, Cs, config.l2), np.zeros(A * (d + 1)), config
    )
    return MultiActionModel(params[: A * d].reshape(A, d).copy(), params[A * d:].copy(), std,
                            tuple(action_order), hist)


def _cost_matrix(samples: Sequence[ActionCostVector]):
    if not samples:
        raise InconsistentActionSets("no samples")
    actions = tuple(samples[0].costs)
    for s in samples:
        if set(s.costs) != set(actions):
            raise InconsistentActionSets("all samples must share the same action set")
    dims = {len(s.features) for s in samples}
    if len(dims) != 1:
        raise DimensionMismatch(f"inconsistent feature dimensions {sorted(dims)}")
    X = np.array([s.features for s in samples], dtype=float)
    C = np.array([[s.costs[a] for a in actions] for s in samples], dtype=float)
    return X, C, actions


def train_cost_sensitive(samples: Sequence[ActionCostVector], config: TrainConfig = TrainConfig()) -> MultiActionModel:
    X, C, actions = _cost_matrix(samples)
    return fit_cost_sensitive(X, C, config, actions)


def predict(model, features):
    """Score ``features`` (one row or a matrix) with a trained model.

    A :class:`LinearModel` gives one real score per row; a
    :class:`MultiActionModel` gives one score per action.
    """
    single = np.asarray(features).ndim == 1
    out = model.score(features) if isinstance(model, LinearModel) else model.scores(features)
    return out[0] if single else out


def _binary_arrays(model, samples):
    X = _as_2d([s.features for s in samples], model.dim)
    y = np.array([s.pseudo_label for s in samples], dtype=float)
    v = np.array([s.importance for s in samples], dtype=float)
    return model.standardizer.transform(X), y, v


def _params(model):
    if isinstance(model, LinearModel):
        return np.append(model.weights, model.bias)
    return np.concatenate([model.weights.ravel(), model.bias])


def risk(model, samples, l2: float = 0.0) -> float:
    return _risk_and_grad(model, samples, l2, _params(model))[0]


def risk_gradient(model, samples, l2: float = 0.0) -> np.ndarray:
    """Analytic gradient of the training risk at the model's parameters.

    Parameters are ordered ``[weights..., bias]`` for a binary model and
    ``[W row-major..., biases...]`` for a multi-action model, both in the
    standardized feature space.
    """
    return _risk_and_grad(model, samples, l2, _params(model))[1]


def _risk_and_grad(model, samples, l2, params):
    if isinstance(model, LinearModel):
        Z, y, v = _binary_arrays(model, samples)
        return logistic_objective(params, Z, y, v, l2)
    X, C, actions = _cost_matrix(samples)
    if model.action_order and tuple(actions) != tuple(model.action_order):
        C = C[:, [actions.index(a) for a in model.action_order]]
    if C.shape[1] != len(model.bias):
        raise DimensionMismatch("cost vectors do not match the model's actions")
    Z = model.standardizer.transform(_as_2d(X, model.dim))
    return expected_cost_objective(params, Z, C, l2)


def with_params(model, params):
    """Copy of ``model`` with a replaced flat parameter vector."""
    params = np.asarray(params, dtype=float)
    if isinstance(model, LinearModel):
        return LinearModel(params[:-1].copy(), float(params[-1]), model.standardizer, model.action_order)
    A, d = model.weights.shape
    return MultiActionModel(params[: A * d].reshape(A, d).copy(), params[A * d:].copy(),
                            model.standardizer, model.action_order)


def threshold_wbc(x, pseudo_labels, importance, grid):
    """Exact weighted 0/1 minimizer over threshold rules ``+1 iff x > t``.

    Returns ``(best index, risks per grid point)``; ties go to the earliest
    grid point.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise EmptyGrid("threshold grid is empty")
    x = np.asarray(x, dtype=float)
    y = np.asarray(pseudo_labels)
    v = np.asarray(importance, dtype=float)
    pred = np.where(x[None, :] > grid[:, None], 1, -1)
    risks = ((pred != y[None, :]) * v[None, :]).mean(axis=1)
    return int(np.argmin(risks)), risks
