"""Cross-fitted nuisance functions: outcome regression, conditional and individual propensity.

For every fold k the learners are trained on the clusters outside k and scored
on the clusters in k, so no prediction ever comes from a model that saw its own
cluster.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import ClusterData, Dataset, FoldAssignment
from .dgp import (
    DGP_TAGS,
    QUAD_NODES,
    SimConfig,
    true_conditional_propensity,
    true_outcome_regression,
    true_propensity,
)
from .learners import DEFAULT_CLIP, LearnerFitError, LearnerSpec, fit_learner
from .rng import derive_generator


@dataclass(frozen=True)
class FeatureRow:
    values: np.ndarray
    names: tuple[str, ...]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 1 or len(values) != len(self.names):
            raise ValueError("values and names must have the same length")
        if not np.all(np.isfinite(values)):
            raise ValueError("feature values must be finite")
        if len(set(self.names)) != len(self.names):
            raise ValueError("feature names must be unique")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", tuple(self.names))


def _names(c: ClusterData, unit_names, cluster_names):
    p, q = c.w_unit.shape[1], len(c.c_cluster)
    unit_names = list(unit_names or [f"w__{k}" for k in range(p)])
    cluster_names = list(cluster_names or [f"c__{k}" for k in range(q - 1)] + ["c__n"])
    return unit_names, cluster_names


def _check_unit(c: ClusterData, j: int):
    if not 0 <= j < c.n:
        raise IndexError(f"unit {j} out of range for cluster {c.cluster_id!r} of size {c.n}")


def build_outcome_features(c: ClusterData, j: int, a_override: int | None = None,
                           unit_names=None, cluster_names=None) -> FeatureRow:
    """[treatment, own unit covariates, cluster covariates]."""
    _check_unit(c, j)
    un, cn = _names(c, unit_names, cluster_names)
    a = c.a[j] if a_override is None else a_override
    return FeatureRow(np.concatenate([[a], c.w_unit[j], c.c_cluster]), ("a", *un, *cn))


def build_cps_features(c: ClusterData, j: int, unit_names=None, cluster_names=None) -> FeatureRow:
    """[share of treated peers, own unit covariates, peer mean covariates, cluster covariates, has_peers].

    Singleton clusters get zero peer summaries and ``has_peers = 0``.
    """
    _check_unit(c, j)
    un, cn = _names(c, unit_names, cluster_names)
    if c.n > 1:
        a_bar = (c.a.sum() - c.a[j]) / (c.n - 1)
        w_bar = (c.w_unit.sum(axis=0) - c.w_unit[j]) / (c.n - 1)
    else:
        a_bar, w_bar = 0.0, np.zeros(c.w_unit.shape[1])
    names = ("a_peers", *un, *(f"{u}_peers" for u in un), *cn, "has_peers")
    return FeatureRow(
        np.concatenate([[a_bar], c.w_unit[j], w_bar, c.c_cluster, [float(c.n > 1)]]), names
    )


# -- vectorised designs (row-for-row equal to the builders above) ----------


def outcome_design(d: Dataset, a=None) -> np.ndarray:
    a = d.a if a is None else np.broadcast_to(a, d.a.shape)
    return np.column_stack([a.astype(float), d.w_unit, d.c_cluster[d.group]])


def cps_design(d: Dataset) -> np.ndarray:
    starts = d.offsets[:-1]
    n = d.sizes[d.group].astype(float)
    peers = np.maximum(n - 1.0, 1.0)
    has_peers = (n > 1).astype(float)
    a = d.a.astype(float)
    a_bar = (np.add.reduceat(a, starts)[d.group] - a) / peers * has_peers
    if d.w_unit.shape[1]:
        w_bar = (np.add.reduceat(d.w_unit, starts, axis=0)[d.group] - d.w_unit) / peers[:, None]
        w_bar *= has_peers[:, None]
    else:
        w_bar = d.w_unit
    return np.column_stack([a_bar, d.w_unit, w_bar, d.c_cluster[d.group], has_peers])


def propensity_design(d: Dataset) -> np.ndarray:
    return np.column_stack([d.w_unit, d.c_cluster[d.group]])


# -- fits -------------------------------------------------------------------


@dataclass(frozen=True)
class NuisanceFit:
    """Per-unit cross-fitted predictions, aligned with the dataset's unit arrays."""

    g0: np.ndarray
    g1: np.ndarray
    pi1: np.ndarray
    e1: np.ndarray
    fold_trained_on: np.ndarray
    clip: float = DEFAULT_CLIP

    def __post_init__(self):
        n = len(self.g0)
        for name in ("g1", "pi1", "e1", "fold_trained_on"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has the wrong length")

    def g(self, a: np.ndarray) -> np.ndarray:
        """Prediction at the observed arm."""
        return np.where(np.asarray(a) == 1, self.g1, self.g0)

    def for_cluster(self, d: Dataset, i: int) -> "NuisanceFit":
        sl = slice(d.offsets[i], d.offsets[i + 1])
        return NuisanceFit(self.g0[sl], self.g1[sl], self.pi1[sl], self.e1[sl],
                           self.fold_trained_on[sl], self.clip)

    def replace(self, **changes) -> "NuisanceFit":
        fields = dict(g0=self.g0, g1=self.g1, pi1=self.pi1, e1=self.e1,
                      fold_trained_on=self.fold_trained_on, clip=self.clip)
        fields.update(changes)
        return NuisanceFit(**fields)


def undersample_clusters(clusters: Sequence[ClusterData], m: int, seed: int = 0) -> list[ClusterData]:
    """Subsample clusters larger than ``m`` down to ``m`` units, without replacement."""
    if m < 1:
        raise ValueError("m must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for c in clusters:
        if c.n <= m:
            out.append(c)
            continue
        keep = np.sort(rng.choice(c.n, size=m, replace=False))
        out.append(ClusterData(c.cluster_id, c.y[keep], c.a[keep], c.w_unit[keep],
                               c.c_cluster, c.weight))
    return out


def _undersample_dataset(d: Dataset, m: int, seed: int) -> Dataset:
    return Dataset.from_clusters(undersample_clusters(d.clusters, m, seed),
                                 d.unit_names, d.cluster_names)


def oracle_learners(cfg: SimConfig, nodes: int = QUAD_NODES):
    """Oracle (g, pi, e) specs that evaluate the true functions of ``cfg``'s design."""
    if cfg.dgp not in DGP_TAGS:
        raise ValueError(f"unsupported dgp {cfg.dgp!r}")
    spec = LearnerSpec("oracle", {"dgp": cfg.dgp, "sigma_v": cfg.sigma_v, "nodes": nodes})
    return spec, spec, spec


def _oracle_params(spec: LearnerSpec):
    hp = spec.hyperparameters
    if hp.get("dgp", "table1") not in DGP_TAGS:
        raise ValueError(f"unsupported oracle dgp {hp.get('dgp')!r}")
    return float(hp.get("sigma_v", 0.0)), int(hp.get("nodes", QUAD_NODES))


def fit_nuisances(
    d: Dataset,
    folds: FoldAssignment,
    g_spec: LearnerSpec,
    pi_spec: LearnerSpec | None,
    e_spec: LearnerSpec | None,
    clip: float = DEFAULT_CLIP,
    undersample: int | None = None,
    seed: int = 0,
    undersample_repeats: int = 1,
) -> NuisanceFit:
    """Cross-fit the three nuisance functions and clip the propensities to [clip, 1 - clip].

    ``undersample=m`` trains the conditional propensity on clusters subsampled
    to at most ``m`` units; with ``undersample_repeats > 1`` the median of the
    repeated fits is used.  A propensity spec of ``None`` skips that model and
    fills its predictions with 0.5.
    """
    if not 0 < clip < 0.5:
        raise ValueError("clip must lie in (0, 0.5)")
    fold_of_cluster = folds.folds_for(d)
    fold_of_unit = fold_of_cluster[d.group]
    T = d.n_units
    g0, g1, pi1, e1 = (np.empty(T) for _ in range(4))
    if pi_spec is None:
        pi1[:] = 0.5
    if e_spec is None:
        e1[:] = 0.5

    if g_spec.is_oracle:
        g0[:] = true_outcome_regression(d, 0)
        g1[:] = true_outcome_regression(d, 1)
    if pi_spec is not None and pi_spec.is_oracle:
        pi1[:] = true_conditional_propensity(d, *_oracle_params(pi_spec))
    if e_spec is not None and e_spec.is_oracle:
        e1[:] = true_propensity(d, *_oracle_params(e_spec))

    for k in range(folds.k):
        test_units = fold_of_unit == k
        if not test_units.any():
            continue
        train = d.subset(np.flatnonzero(fold_of_cluster != k))
        test = d.subset(np.flatnonzero(fold_of_cluster == k))
        try:
            if not g_spec.is_oracle:
                model = fit_learner(g_spec, outcome_design(train), train.y, "regression", clip)
                g0[test_units] = model(outcome_design(test, 0))
                g1[test_units] = model(outcome_design(test, 1))
            if pi_spec is not None and not pi_spec.is_oracle:
                x_test = cps_design(test)
                preds = []
                for r in range(max(1, undersample_repeats) if undersample else 1):
                    sub = train if undersample is None else _undersample_dataset(
                        train, undersample, int(derive_generator(seed, k, r).integers(2**31)))
                    model = fit_learner(pi_spec, cps_design(sub), sub.a, "classification", clip)
                    preds.append(model(x_test))
                pi1[test_units] = np.median(preds, axis=0)
            if e_spec is not None and not e_spec.is_oracle:
                model = fit_learner(e_spec, propensity_design(train), train.a, "classification", clip)
                e1[test_units] = model(propensity_design(test))
        except LearnerFitError as exc:
            raise LearnerFitError(f"fold {k}: {exc}") from exc

    return NuisanceFit(
        g0, g1, np.clip(pi1, clip, 1 - clip), np.clip(e1, clip, 1 - clip), fold_of_unit, clip
    )
