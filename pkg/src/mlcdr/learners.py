"""Small menu of deterministic nuisance learners with a scikit-learn interface.

All learners follow the usual ``fit``/``predict`` (and ``predict_proba`` for
classifiers) protocol and inherit ``get_params``/``set_params`` from
:class:`sklearn.base.BaseEstimator`, so they can be cloned, grid-searched or
dropped into pipelines.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin
from sklearn.preprocessing import PolynomialFeatures
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

LEARNER_KINDS = ("linear-ridge", "logistic-ridge", "boosted-stumps", "knn", "oracle")
DEFAULT_CLIP = 0.01


class LearnerFitError(RuntimeError):
    pass


def expit(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def _standardize(X):
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    sd[sd < 1e-12] = 1.0
    return mu, sd


def _expand(X, degree):
    if degree <= 1:
        return X
    return PolynomialFeatures(degree, include_bias=False).fit_transform(X)


class RidgeRegression(RegressorMixin, BaseEstimator):
    """Least squares with an L2 penalty on the (standardised) slopes.

    The intercept is never penalised; ``alpha=0`` gives ordinary least squares.
    """

    def __init__(self, alpha: float = 1.0, degree: int = 1):
        self.alpha = alpha
        self.degree = degree

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        Z = _expand(X, self.degree)
        self.mu_, self.sd_ = _standardize(Z)
        Zs = (Z - self.mu_) / self.sd_
        ym = y.mean()
        p = Zs.shape[1]
        lhs = np.vstack([Zs, np.sqrt(self.alpha) * np.eye(p)]) if self.alpha > 0 else Zs
        rhs = np.concatenate([y - ym, np.zeros(p)]) if self.alpha > 0 else y - ym
        self.coef_ = np.linalg.lstsq(lhs, rhs, rcond=None)[0]
        self.intercept_ = ym
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        Z = _expand(check_array(X), self.degree)
        return self.intercept_ + ((Z - self.mu_) / self.sd_) @ self.coef_


class _ProbabilityClassifier(ClassifierMixin, BaseEstimator):
    """Shared handling of the single-class case and ``predict``."""

    def _degenerate(self, y) -> bool:
        self.classes_ = np.array([0, 1])
        self.rate_ = float(np.mean(y))
        self.constant_ = self.rate_ in (0.0, 1.0)
        return self.constant_

    def _constant_proba(self, n):
        p = min(max(self.rate_, self.clip), 1.0 - self.clip)
        return np.full(n, p)

    def predict_proba(self, X):
        p1 = self._positive_proba(X)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X):
        return (self._positive_proba(X) >= 0.5).astype(int)


def _check_binary(y):
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification targets must be 0/1")


class LogisticRidge(_ProbabilityClassifier):
    """L2-penalised logistic regression fit by Newton-Raphson."""

    def __init__(self, alpha: float = 1.0, degree: int = 1, max_iter: int = 100,
                 tol: float = 1e-10, clip: float = DEFAULT_CLIP):
        self.alpha = alpha
        self.degree = degree
        self.max_iter = max_iter
        self.tol = tol
        self.clip = clip

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        _check_binary(y)
        self.n_features_in_ = X.shape[1]
        if self._degenerate(y):
            return self
        Z = _expand(X, self.degree)
        self.mu_, self.sd_ = _standardize(Z)
        Zs = np.column_stack([np.ones(len(y)), (Z - self.mu_) / self.sd_])
        pen = np.full(Zs.shape[1], max(self.alpha, 1e-8))
        pen[0] = 0.0
        beta = np.zeros(Zs.shape[1])
        beta[0] = np.log(self.rate_ / (1 - self.rate_))
        for _ in range(self.max_iter):
            p = expit(Zs @ beta)
            grad = Zs.T @ (p - y) + pen * beta
            hess = (Zs * (p * (1 - p))[:, None]).T @ Zs + np.diag(pen)
            step = np.linalg.solve(hess, grad)
            beta -= step
            if np.max(np.abs(step)) < self.tol:
                break
        self.coef_ = beta
        return self

    def _positive_proba(self, X):
        check_is_fitted(self, "rate_")
        X = check_array(X)
        if self.constant_:
            return self._constant_proba(len(X))
        Z = _expand(X, self.degree)
        Zs = np.column_stack([np.ones(len(X)), (Z - self.mu_) / self.sd_])
        return expit(Zs @ self.coef_)


# -- boosted shallow trees --------------------------------------------------


def _best_split(X, order, rows, grad, hess, min_leaf, lam):
    """Exhaustive split search over presorted features; ties go to the first candidate."""
    inside = np.zeros(len(X), dtype=bool)
    inside[rows] = True
    G, H = grad[rows].sum(), hess[rows].sum()
    parent = G * G / (H + lam)
    best = (0.0, -1, 0.0)
    m = len(rows)
    if m < 2 * min_leaf:
        return best
    for f in range(X.shape[1]):
        idx = order[:, f][inside[order[:, f]]]
        xs = X[idx, f]
        gl = np.cumsum(grad[idx])[:-1]
        hl = np.cumsum(hess[idx])[:-1]
        valid = xs[1:] > xs[:-1]
        valid[: min_leaf - 1] = False
        valid[m - min_leaf:] = False
        if not valid.any():
            continue
        gain = gl ** 2 / (hl + lam) + (G - gl) ** 2 / (H - hl + lam) - parent
        gain[~valid] = -np.inf
        k = int(np.argmax(gain))
        if gain[k] > best[0] + 1e-12:
            best = (float(gain[k]), f, 0.5 * (xs[k] + xs[k + 1]))
    return best


def _grow_tree(X, order, grad, hess, depth, min_leaf, lam):
    feature, threshold, left, right, value = [], [], [], [], []

    def node(rows, level):
        k = len(feature)
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(-grad[rows].sum() / (hess[rows].sum() + lam))
        if level < depth:
            gain, f, thr = _best_split(X, order, rows, grad, hess, min_leaf, lam)
            if f >= 0:
                go_left = X[rows, f] <= thr
                feature[k], threshold[k] = f, thr
                left[k] = node(rows[go_left], level + 1)
                right[k] = node(rows[~go_left], level + 1)
        return k

    node(np.arange(len(X)), 0)
    return (np.array(feature), np.array(threshold), np.array(left), np.array(right),
            np.array(value))


def _tree_predict(tree, X):
    feature, threshold, left, right, value = tree
    at = np.zeros(len(X), dtype=np.int64)
    rows = np.arange(len(X))
    while True:
        f = feature[at]
        internal = f >= 0
        if not internal.any():
            return value[at]
        go_left = X[rows, np.where(internal, f, 0)] <= threshold[at]
        at = np.where(internal, np.where(go_left, left[at], right[at]), at)


class _BoostedTrees(BaseEstimator):
    def __init__(self, n_rounds: int = 100, learning_rate: float = 0.1, depth: int = 1,
                 min_leaf: int = 5, reg_lambda: float = 1e-6, clip: float = DEFAULT_CLIP):
        self.n_rounds = n_rounds
        self.learning_rate = learning_rate
        self.depth = depth
        self.min_leaf = min_leaf
        self.reg_lambda = reg_lambda
        self.clip = clip

    def _boost(self, X, y, base, gradients):
        if self.n_rounds < 1 or self.depth < 1 or self.min_leaf < 1:
            raise ValueError("n_rounds, depth and min_leaf must be >= 1")
        order = np.argsort(X, axis=0, kind="stable")
        F = np.full(len(y), base)
        self.trees_ = []
        for _ in range(self.n_rounds):
            g, h = gradients(F)
            tree = _grow_tree(X, order, g, h, self.depth, self.min_leaf, self.reg_lambda)
            self.trees_.append(tree)
            F += self.learning_rate * _tree_predict(tree, X)
        self.base_ = base

    def _raw(self, X):
        check_is_fitted(self, "base_")
        X = check_array(X)
        F = np.full(len(X), self.base_)
        for tree in self.trees_:
            F += self.learning_rate * _tree_predict(tree, X)
        return F


class BoostedTreesRegressor(RegressorMixin, _BoostedTrees):
    """Gradient boosting of depth-limited trees under squared loss (depth 1 = stumps)."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.n_features_in_ = X.shape[1]
        ones = np.ones(len(y))
        self._boost(X, y, float(y.mean()), lambda F: (F - y, ones))
        return self

    def predict(self, X):
        return self._raw(X)


class BoostedTreesClassifier(_ProbabilityClassifier, _BoostedTrees):
    """Logistic-loss boosting with Newton leaf values."""

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        _check_binary(y)
        self.n_features_in_ = X.shape[1]
        if self._degenerate(y):
            return self

        def gradients(F):
            p = expit(F)
            return p - y, np.maximum(p * (1 - p), 1e-12)

        self._boost(X, y.astype(float), float(np.log(self.rate_ / (1 - self.rate_))), gradients)
        return self

    def _positive_proba(self, X):
        check_is_fitted(self, "rate_")
        if self.constant_:
            return self._constant_proba(len(check_array(X)))
        return expit(self._raw(X))


# -- nearest neighbours -----------------------------------------------------


class _KNN(BaseEstimator):
    def __init__(self, k: int = 10, clip: float = DEFAULT_CLIP):
        self.k = k
        self.clip = clip

    def _store(self, X, y):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.mu_, self.sd_ = _standardize(X)
        self.X_ = (X - self.mu_) / self.sd_
        self.y_ = np.asarray(y, dtype=float)
        self.n_features_in_ = X.shape[1]

    def _average(self, X, chunk=512):
        check_is_fitted(self, "X_")
        X = (check_array(X) - self.mu_) / self.sd_
        k = min(self.k, len(self.X_))
        out = np.empty(len(X))
        sq = (self.X_ ** 2).sum(axis=1)
        for s in range(0, len(X), chunk):
            B = X[s : s + chunk]
            dist = sq[None, :] - 2.0 * B @ self.X_.T + (B ** 2).sum(axis=1)[:, None]
            nn = np.argsort(dist, axis=1, kind="stable")[:, :k]
            out[s : s + chunk] = self.y_[nn].mean(axis=1)
        return out


class KNNRegressor(RegressorMixin, _KNN):
    """Brute-force k-nearest-neighbour mean on standardised features."""

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self._store(X, y)
        return self

    def predict(self, X):
        return self._average(X)


class KNNClassifier(_ProbabilityClassifier, _KNN):
    def fit(self, X, y):
        X, y = check_X_y(X, y)
        _check_binary(y)
        self._store(X, y)
        self._degenerate(y)
        return self

    def _positive_proba(self, X):
        if self.constant_:
            return self._constant_proba(len(check_array(X)))
        return self._average(X)


# -- specs ------------------------------------------------------------------

_HYPER = {
    "linear-ridge": {"lambda": ("alpha", 0.0, float), "degree": ("degree", 1, int)},
    "logistic-ridge": {"lambda": ("alpha", 0.0, float), "degree": ("degree", 1, int)},
    "boosted-stumps": {
        "rounds": ("n_rounds", 1, int),
        "learning_rate": ("learning_rate", 0.0, float),
        "depth": ("depth", 1, int),
        "min_leaf": ("min_leaf", 1, int),
    },
    "knn": {"k": ("k", 1, int)},
    "oracle": {},
}


@dataclass(frozen=True)
class LearnerSpec:
    """Learner kind plus hyperparameters, as written in JSON configs.

    Hyperparameter names: ``lambda``/``degree`` (ridge kinds), ``rounds``,
    ``learning_rate``, ``depth``, ``min_leaf`` (boosting), ``k`` (knn).  Oracle
    specs carry ``dgp`` and the simulation parameters they need.
    """

    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; choose from {LEARNER_KINDS}")
        allowed = _HYPER[self.kind]
        for name, value in self.hyperparameters.items():
            if self.kind == "oracle":
                continue
            if name not in allowed:
                raise ValueError(f"{self.kind}: unknown hyperparameter {name!r}")
            _, lower, cast = allowed[name]
            if not cast(value) >= lower or (name == "learning_rate" and not value > 0):
                raise ValueError(f"{self.kind}: {name} out of range ({value!r})")
        object.__setattr__(self, "hyperparameters", dict(self.hyperparameters))

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "LearnerSpec":
        d = dict(d)
        kind = d.pop("kind")
        return cls(kind, d)

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.hyperparameters}

    @property
    def is_oracle(self) -> bool:
        return self.kind == "oracle"

    def make(self, task: str, clip: float = DEFAULT_CLIP) -> BaseEstimator:
        if self.is_oracle:
            raise ValueError("oracle learners are evaluated from the data-generating process")
        params = {_HYPER[self.kind][k][0]: _HYPER[self.kind][k][2](v)
                  for k, v in self.hyperparameters.items()}
        if task == "regression":
            if self.kind == "logistic-ridge":
                raise ValueError("logistic-ridge is a classifier")
            cls = {"linear-ridge": RidgeRegression, "boosted-stumps": BoostedTreesRegressor,
                   "knn": KNNRegressor}[self.kind]
            return cls(**params)
        if task == "classification":
            if self.kind == "linear-ridge":
                raise ValueError("linear-ridge is a regressor")
            cls = {"logistic-ridge": LogisticRidge, "boosted-stumps": BoostedTreesClassifier,
                   "knn": KNNClassifier}[self.kind]
            return cls(clip=clip, **params)
        raise ValueError(f"unknown task {task!r}")


@dataclass(frozen=True)
class Predictor:
    """Fitted learner as a plain scoring function."""

    estimator: BaseEstimator
    task: str

    def __call__(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if self.task == "classification":
            return self.estimator.predict_proba(X)[:, 1]
        return self.estimator.predict(X)


def fit_learner(spec: LearnerSpec, rows, targets, task: str,
                clip: float = DEFAULT_CLIP) -> Predictor:
    """Fit ``spec`` on ``rows`` (2-d array or sequence of feature rows)."""
    X = np.asarray([getattr(r, "values", r) for r in rows], dtype=float) if not isinstance(
        rows, np.ndarray) else rows
    y = np.asarray(targets, dtype=float)
    if X.ndim != 2 or len(X) == 0:
        raise LearnerFitError("empty training set")
    est = spec.make(task, clip)
    try:
        est.fit(X, y)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise LearnerFitError(f"{spec.kind} fit failed: {exc}") from exc
    return Predictor(est, task)
