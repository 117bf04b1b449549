"""Cross-fitted doubly robust estimators of the weighted average treatment effect.

Two per-cluster influence functions are provided:

``aipw``
    the usual augmented IPW score averaged over the cluster, weighted by the
    individual propensity e(1 | X_ij);
``proposed``
    the same score weighted by the conditional propensity pi(1 | A_i(-j), X_i),
    with each unit's residual adjusted by ``beta(C_i)`` times the sum of its
    peers' residuals.

With beta = 0 and pi = e the two coincide.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Any, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .covariance import BetaModel, StrataSpec, default_strata, fit_beta_stratified
from .data import ClusterData, Dataset, FoldAssignment, split_clusters
from .learners import DEFAULT_CLIP, LearnerSpec
from .nuisance import NuisanceFit, fit_nuisances
from .rng import derive_seed

METHODS = ("proposed", "aipw")


class NumericGuardError(ArithmeticError):
    pass


def default_learners() -> dict[str, LearnerSpec]:
    return {
        "g": LearnerSpec("boosted-stumps", {"rounds": 200, "learning_rate": 0.1, "depth": 3}),
        "pi": LearnerSpec("boosted-stumps", {"rounds": 100, "learning_rate": 0.1, "depth": 2}),
        "e": LearnerSpec("boosted-stumps", {"rounds": 100, "learning_rate": 0.1, "depth": 2}),
    }


def _guard(p: np.ndarray, name: str):
    if np.any(~(p > 0) | ~(p < 1)):
        raise NumericGuardError(f"{name} must lie strictly inside (0, 1)")


def influence_aipw(c: ClusterData, fit: NuisanceFit) -> float:
    """AIPW score of one cluster; ``fit`` holds that cluster's predictions."""
    e1 = np.asarray(fit.e1, dtype=float)
    _guard(e1, "e1")
    a, y, g0, g1 = c.a, c.y, fit.g0, fit.g1
    terms = a * (y - g1) / e1 + g1 - (1 - a) * (y - g0) / (1 - e1) - g0
    return c.weight / c.n * float(terms.sum())


def influence_proposed(c: ClusterData, fit: NuisanceFit, beta: BetaModel | float,
                       cluster_names: Sequence[str] | None = None) -> float:
    """Conditional-propensity score with peer-residual adjustment for one cluster."""
    pi1 = np.asarray(fit.pi1, dtype=float)
    _guard(pi1, "pi1")
    b = beta if np.isscalar(beta) else beta.gamma[beta.strata.label(c, cluster_names)]
    a, y, g0, g1 = c.a, c.y, fit.g0, fit.g1
    r = y - np.where(a == 1, g1, g0)
    adjusted = r - b * (r.sum() - r)
    terms = a * adjusted / pi1 + g1 - (1 - a) * adjusted / (1 - pi1) - g0
    return c.weight / c.n * float(terms.sum())


def influence_values(d: Dataset, fit: NuisanceFit, method: str,
                     betas: np.ndarray | float = 0.0) -> np.ndarray:
    """Vectorised per-cluster scores for all clusters of ``d``.

    ``betas`` is a scalar or one coefficient per cluster (ignored for ``aipw``).
    """
    a = d.a.astype(float)
    r = d.y - np.where(d.a == 1, fit.g1, fit.g0)
    starts = d.offsets[:-1]
    if method == "aipw":
        p = fit.e1
        _guard(p, "e1")
        adjusted = r
    elif method == "proposed":
        p = fit.pi1
        _guard(p, "pi1")
        b = np.broadcast_to(np.asarray(betas, dtype=float), (d.n_clusters,))[d.group]
        adjusted = r - b * (np.add.reduceat(r, starts)[d.group] - r)
    else:
        raise ValueError(f"unknown method {method!r}")
    terms = a * adjusted / p - (1 - a) * adjusted / (1 - p) + fit.g1 - fit.g0
    return d.weight / d.sizes * np.add.reduceat(terms, starts)


@dataclass
class CrossfitEstimate:
    tau: float
    var_hat: float
    n_clusters: int
    influence: np.ndarray
    per_fold_tau: np.ndarray
    method: str
    fold_index: np.ndarray
    beta_used: list[BetaModel] | None = None
    folds: FoldAssignment | None = None
    nuisance: NuisanceFit | None = field(default=None, repr=False)

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_hat / self.n_clusters))

    @classmethod
    def from_influence(cls, influence, fold_index, method: str, **extra) -> "CrossfitEstimate":
        """Point estimate and variance with fold-specific centring."""
        influence = np.asarray(influence, dtype=float)
        fold_index = np.asarray(fold_index, dtype=np.int64)
        K = int(fold_index.max()) + 1
        counts = np.bincount(fold_index, minlength=K)
        fold_tau = np.bincount(fold_index, influence, minlength=K) / np.maximum(counts, 1)
        N = len(influence)
        var_hat = float(np.sum((influence - fold_tau[fold_index]) ** 2) / N)
        return cls(float(influence.mean()), var_hat, N, influence, fold_tau, method,
                   fold_index, **extra)


@dataclass(frozen=True)
class AggregateEstimate:
    tau_med: float
    var_med: float
    s: int
    n_clusters: int

    @property
    def tau(self) -> float:
        return self.tau_med

    @property
    def var_hat(self) -> float:
        return self.var_med

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_med / self.n_clusters))


def estimate(
    d: Dataset,
    method: str = "proposed",
    folds: int = 2,
    g_spec: LearnerSpec | None = None,
    pi_spec: LearnerSpec | None = None,
    e_spec: LearnerSpec | None = None,
    strata: StrataSpec | int | None = None,
    clip: float = DEFAULT_CLIP,
    seed: int = 0,
    undersample: int | None = None,
    undersample_repeats: int = 1,
    beta: float | None = None,
) -> CrossfitEstimate:
    """One cross-fitting cycle.

    Clusters are processed in cluster-id order internally; the returned
    influence vector follows the order of ``d``.  ``strata`` may be a
    :class:`StrataSpec` or a number of cluster-size strata (default 1).
    ``beta`` fixes the covariance coefficient instead of fitting it.
    """
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}")
    learners = default_learners()
    g_spec, pi_spec, e_spec = g_spec or learners["g"], pi_spec or learners["pi"], e_spec or learners["e"]
    order = np.argsort(np.array(d.cluster_ids), kind="stable")
    canon = d.subset(order)
    assignment = split_clusters(canon, folds, seed)
    fold_index = assignment.folds_for(canon)
    counts = np.bincount(fold_index, minlength=folds)
    if np.any(counts < 2):
        raise ValueError("every fold needs at least 2 clusters")

    fit = fit_nuisances(
        canon, assignment, g_spec,
        pi_spec if method == "proposed" else None,
        e_spec if method == "aipw" else None,
        clip, undersample, seed, undersample_repeats,
    )

    betas = np.zeros(canon.n_clusters)
    models = None
    if method == "proposed":
        if beta is not None:
            betas[:] = beta
        else:
            if not isinstance(strata, StrataSpec):
                strata = default_strata(canon, 1 if strata is None else int(strata))
            models = []
            for k in range(folds):
                idx = np.flatnonzero(fold_index == k)
                sub = canon.subset(idx)
                sub_fit = _take(fit, canon, idx)
                model = fit_beta_stratified(sub, sub_fit, strata)
                models.append(model)
                betas[idx] = model.for_clusters(sub)
    phi = influence_values(canon, fit, method, betas)

    back = np.empty_like(order)
    back[order] = np.arange(len(order))
    unit_back = np.concatenate([np.arange(canon.offsets[i], canon.offsets[i + 1]) for i in back])
    fit_out = NuisanceFit(*(getattr(fit, n)[unit_back] for n in ("g0", "g1", "pi1", "e1",
                                                                 "fold_trained_on")), clip)
    # summing in canonical order keeps tau bit-identical under cluster reordering
    est = CrossfitEstimate.from_influence(phi, fold_index, method, beta_used=models,
                                          folds=assignment, nuisance=fit_out)
    est.influence, est.fold_index = phi[back], fold_index[back]
    return est


def _take(fit: NuisanceFit, d: Dataset, idx: np.ndarray) -> NuisanceFit:
    rows = np.concatenate([np.arange(d.offsets[i], d.offsets[i + 1]) for i in idx])
    return NuisanceFit(fit.g0[rows], fit.g1[rows], fit.pi1[rows], fit.e1[rows],
                       fit.fold_trained_on[rows], fit.clip)


def normal_quantile(p: float) -> float:
    return NormalDist().inv_cdf(p)


def confidence_interval(e: CrossfitEstimate | AggregateEstimate, level: float = 0.95):
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    half = normal_quantile((1 + level) / 2) * np.sqrt(e.var_hat / e.n_clusters)
    return float(e.tau - half), float(e.tau + half)


def _lower_median(x: np.ndarray) -> float:
    s = np.sort(x)
    return float(s[(len(s) - 1) // 2])


def median_aggregate(estimates: Sequence[CrossfitEstimate]) -> AggregateEstimate:
    """Median over repeated splits; even counts take the lower median."""
    if not estimates:
        raise ValueError("need at least one estimate")
    tau = np.array([e.tau for e in estimates])
    var = np.array([e.var_hat for e in estimates])
    tau_med = _lower_median(tau)
    var_med = _lower_median((tau - tau_med) ** 2 + var)
    return AggregateEstimate(tau_med, var_med, len(estimates), estimates[0].n_clusters)


@dataclass(frozen=True)
class SubgroupEffect:
    column: str
    proportion: float
    tau: float
    var_hat: float
    n_clusters: int
    ci: tuple[float, float]

    @property
    def se(self) -> float:
        return float(np.sqrt(self.var_hat / self.n_clusters))


def subgroup_effect(d: Dataset, indicator_column: str, e, level: float = 0.95) -> SubgroupEffect:
    """Rescale an estimate computed with weight = indicator to the subgroup effect."""
    ind = d.cluster_column(indicator_column)
    if not np.all((ind == 0) | (ind == 1)):
        raise ValueError(f"{indicator_column} must be a 0/1 indicator")
    p = float(ind.mean())
    if p == 0:
        raise ValueError(f"subgroup {indicator_column} is empty")
    lo, hi = confidence_interval(e, level)
    return SubgroupEffect(indicator_column, p, e.tau / p, e.var_hat / p ** 2, e.n_clusters,
                          (lo / p, hi / p))


# -- scikit-learn style front end ------------------------------------------


def _as_spec(x) -> LearnerSpec | None:
    if x is None or isinstance(x, LearnerSpec):
        return x
    return LearnerSpec.from_dict(x)


class MultilevelDR(BaseEstimator):
    """Cross-fitted doubly robust ATE estimator for clustered data.

    ``fit`` accepts a :class:`~mlcdr.data.Dataset`, or unit covariates ``X``
    with ``y``, ``treatment`` and ``groups`` (cluster ids) and optionally
    per-unit ``cluster_features`` and ``sample_weight``.  After fitting,
    ``tau_``, ``var_``, ``se_`` hold the median-aggregated results over
    ``n_splits`` random splits and ``estimates_`` the individual splits.
    """

    def __init__(self, method="proposed", n_folds=2, n_splits=1, g_learner=None,
                 pi_learner=None, e_learner=None, n_strata=1, strata=None, clip=DEFAULT_CLIP,
                 undersample=None, undersample_repeats=1, level=0.95, random_state=0):
        self.method = method
        self.n_folds = n_folds
        self.n_splits = n_splits
        self.g_learner = g_learner
        self.pi_learner = pi_learner
        self.e_learner = e_learner
        self.n_strata = n_strata
        self.strata = strata
        self.clip = clip
        self.undersample = undersample
        self.undersample_repeats = undersample_repeats
        self.level = level
        self.random_state = random_state

    def _dataset(self, X, y, treatment, groups, cluster_features, sample_weight) -> Dataset:
        if isinstance(X, Dataset):
            return X
        X = check_array(X, ensure_min_features=0)
        if y is None or treatment is None or groups is None:
            raise ValueError("array input needs y, treatment and groups")
        return Dataset.from_arrays(groups, y, treatment, X, cluster_features, sample_weight)

    def fit(self, X, y=None, *, treatment=None, groups=None, cluster_features=None,
            sample_weight=None):
        d = self._dataset(X, y, treatment, groups, cluster_features, sample_weight)
        if self.n_splits < 1:
            raise ValueError("n_splits must be >= 1")
        if isinstance(self.strata, StrataSpec):
            strata = self.strata
        elif isinstance(self.strata, dict):
            strata = StrataSpec.from_config(self.strata, d)
        else:
            strata = default_strata(d, self.n_strata)
        self.strata_ = strata
        self.estimates_ = [
            estimate(
                d, self.method, self.n_folds, _as_spec(self.g_learner), _as_spec(self.pi_learner),
                _as_spec(self.e_learner), strata, self.clip, derive_seed(self.random_state, s),
                self.undersample, self.undersample_repeats,
            )
            for s in range(self.n_splits)
        ]
        self.aggregate_ = median_aggregate(self.estimates_)
        self.tau_ = self.aggregate_.tau_med
        self.var_ = self.aggregate_.var_med
        self.se_ = self.aggregate_.se
        self.n_clusters_ = d.n_clusters
        return self

    def confidence_interval(self, level: float | None = None):
        check_is_fitted(self, "aggregate_")
        return confidence_interval(self.aggregate_, self.level if level is None else level)

    def report(self, level: float | None = None, diagnostics: dict | None = None) -> dict[str, Any]:
        """Summary in the JSON report layout."""
        check_is_fitted(self, "aggregate_")
        level = self.level if level is None else level
        first = self.estimates_[0]
        return {
            "method": self.method,
            "tau": self.tau_,
            "se": self.se_,
            "ci": list(self.confidence_interval(level)),
            "level": level,
            "n_clusters": self.n_clusters_,
            "folds": self.n_folds,
            "splits": self.n_splits,
            "per_fold_tau": first.per_fold_tau.tolist(),
            "beta": None if first.beta_used is None else {
                "gamma": [m.gamma.tolist() for m in first.beta_used],
                "strata": self.strata_.to_dict(),
                "clamped": [list(m.clamped) for m in first.beta_used],
            },
            "diagnostics": diagnostics or {},
        }

    def report_json(self, **kwargs) -> str:
        return json.dumps(self.report(**kwargs), indent=2, sort_keys=True)
