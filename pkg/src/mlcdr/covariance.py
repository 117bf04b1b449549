"""Outcome-covariance coefficient beta(C_i), piecewise constant over strata of clusters.

Within cluster i, with ``ivec`` the inverse-probability contrast vector and ``r``
the residual vector, the coefficient enters through ``B(beta) = I + beta (I - 11')``,
i.e. each unit's residual has ``beta`` times the sum of its peers' residuals
subtracted.  Per stratum the objective

    sum_i w_i^2 ivec' B S B ivec,    S = r r'

is a quadratic in gamma_l, minimised in closed form and clamped to [-b0, b0].
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .data import ClusterData, DataError, Dataset, SIZE_COLUMN
from .nuisance import NuisanceFit

log = logging.getLogger(__name__)

DEFAULT_B0 = 10.0
_DEN_FLOOR = 1e-12


@dataclass(frozen=True)
class StrataSpec:
    """Label function L: clusters -> {0, ..., J-1}.

    ``by="cluster_size"`` cuts on ``c__n`` with upper-inclusive thresholds
    ``cuts``; ``by="column"`` maps the levels of a discrete cluster covariate.
    """

    by: str = "cluster_size"
    cuts: tuple[float, ...] = ()
    column: str | None = None
    levels: tuple[float, ...] = ()
    b0: float = DEFAULT_B0
    requested_J: int | None = None

    def __post_init__(self):
        if self.by not in ("cluster_size", "column"):
            raise ValueError(f"unknown strata rule {self.by!r}")
        if self.b0 <= 0:
            raise ValueError("b0 must be positive")
        if self.by == "column" and (not self.column or not self.levels):
            raise ValueError("column strata need a column name and its levels")
        object.__setattr__(self, "cuts", tuple(sorted(float(c) for c in self.cuts)))
        object.__setattr__(self, "levels", tuple(float(v) for v in self.levels))

    @property
    def J(self) -> int:
        return len(self.levels) if self.by == "column" else len(self.cuts) + 1

    def labels(self, d: Dataset) -> np.ndarray:
        """Stratum of every cluster of ``d``."""
        if self.by == "cluster_size":
            return np.searchsorted(np.array(self.cuts), d.cluster_column(SIZE_COLUMN), side="left")
        values = d.cluster_column(self.column)
        lookup = {v: k for k, v in enumerate(self.levels)}
        try:
            return np.array([lookup[float(v)] for v in values], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"{self.column} level {exc.args[0]} has no stratum") from None

    def label(self, c: ClusterData, cluster_names: Sequence[str] | None = None) -> int:
        if self.by == "cluster_size":
            return int(np.searchsorted(np.array(self.cuts), c.c_cluster[-1], side="left"))
        if cluster_names is None:
            raise ValueError("column strata need the cluster covariate names")
        return self.levels.index(float(c.c_cluster[list(cluster_names).index(self.column)]))

    def to_dict(self) -> dict:
        if self.by == "column":
            return {"by": "column", "name": self.column, "levels": list(self.levels), "b0": self.b0}
        return {"by": "cluster_size", "J": self.J, "cuts": list(self.cuts), "b0": self.b0}

    @classmethod
    def from_config(cls, cfg: Mapping[str, Any], d: Dataset) -> "StrataSpec":
        """``{"by": "cluster_size", "J": 3, "b0": 10}`` or ``{"by": "column", "name": "c__region"}``."""
        b0 = float(cfg.get("b0", DEFAULT_B0))
        if cfg.get("by", "cluster_size") == "column":
            name = cfg["name"]
            levels = cfg.get("levels") or np.unique(d.cluster_column(name)).tolist()
            return cls(by="column", column=name, levels=tuple(levels), b0=b0)
        if "cuts" in cfg:
            return cls(cuts=tuple(cfg["cuts"]), b0=b0)
        return default_strata(d, int(cfg.get("J", 1)), b0)


def default_strata(d: Dataset, J: int, b0: float = DEFAULT_B0) -> StrataSpec:
    """Cluster-size strata at the empirical ``l/J`` quantiles (lower interpolation).

    Sizes equal to a cut point go to the lower stratum.  If the sizes cannot
    support ``J`` nonempty strata, J is reduced and the reduction logged.
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    sizes = d.cluster_column(SIZE_COLUMN)
    cuts = np.unique(np.quantile(sizes, np.arange(1, J) / J, method="lower")) if J > 1 else []
    cuts = tuple(c for c in cuts if c < sizes.max())
    if len(cuts) + 1 < J:
        log.info("reduced size strata from J=%d to J=%d", J, len(cuts) + 1)
    return StrataSpec(cuts=cuts, b0=b0, requested_J=J)


@dataclass(frozen=True)
class BetaModel:
    gamma: np.ndarray
    strata: StrataSpec
    clamped: tuple[bool, ...] = field(default=())

    def __post_init__(self):
        gamma = np.asarray(self.gamma, dtype=float)
        if gamma.shape != (self.strata.J,):
            raise ValueError(f"gamma must have length J={self.strata.J}")
        if np.any(np.abs(gamma) > self.strata.b0):
            raise ValueError("gamma outside [-b0, b0]")
        object.__setattr__(self, "gamma", gamma)
        if not self.clamped:
            object.__setattr__(self, "clamped", (False,) * len(gamma))

    @classmethod
    def zero(cls, strata: StrataSpec | None = None) -> "BetaModel":
        strata = strata or StrataSpec()
        return cls(np.zeros(strata.J), strata)

    @classmethod
    def constant(cls, value: float, b0: float = DEFAULT_B0) -> "BetaModel":
        return cls(np.array([value]), StrataSpec(b0=b0))

    def for_clusters(self, d: Dataset) -> np.ndarray:
        return self.gamma[self.strata.labels(d)]

    def to_dict(self) -> dict:
        return {"gamma": self.gamma.tolist(), "strata": self.strata.to_dict(),
                "clamped": list(self.clamped)}


@dataclass(frozen=True)
class ClusterAlgebra:
    ivec: np.ndarray
    resid: np.ndarray
    shat: np.ndarray


def compute_cluster_algebra(c: ClusterData, fit: NuisanceFit) -> ClusterAlgebra:
    """Contrast vector, residuals and residual outer product for one cluster.

    ``fit`` holds the predictions of this cluster's units only.
    """
    for name in ("g0", "g1", "pi1"):
        values = np.asarray(getattr(fit, name), dtype=float)
        if len(values) != c.n or not np.all(np.isfinite(values)):
            bad = next((j for j in range(c.n) if j >= len(values) or not np.isfinite(values[j])), c.n)
            raise DataError(f"missing {name} prediction for unit {bad} of cluster {c.cluster_id!r}")
    a = c.a.astype(bool)
    ivec = np.where(a, 1.0 / fit.pi1, -1.0 / (1.0 - fit.pi1)) / c.n
    resid = c.y - np.where(a, fit.g1, fit.g0)
    return ClusterAlgebra(ivec, resid, np.outer(resid, resid))


def _projections(d: Dataset, fit: NuisanceFit):
    """Per-cluster u = ivec'r and v = ivec'(I - 11')r."""
    a = d.a.astype(bool)
    n = d.sizes[d.group]
    ivec = np.where(a, 1.0 / fit.pi1, -1.0 / (1.0 - fit.pi1)) / n
    resid = d.y - np.where(a, fit.g1, fit.g0)
    starts = d.offsets[:-1]
    u = np.add.reduceat(ivec * resid, starts)
    v = u - np.add.reduceat(ivec, starts) * np.add.reduceat(resid, starts)
    return u, v


def beta_objective(d: Dataset, fit: NuisanceFit, beta: BetaModel) -> float:
    """(2 / N) sum_i w_i^2 ivec' B(beta_i) S B(beta_i) ivec over the clusters of ``d``.

    Evaluated with explicit n x n matrices per cluster.
    """
    betas = beta.for_clusters(d)
    total = 0.0
    for i, c in enumerate(d.clusters):
        alg = compute_cluster_algebra(c, fit.for_cluster(d, i))
        M = np.eye(c.n) - np.ones((c.n, c.n))
        B = np.eye(c.n) + betas[i] * M
        total += d.weight[i] ** 2 * (alg.ivec @ B @ alg.shat @ B @ alg.ivec)
    return 2.0 * total / d.n_clusters


def fit_beta_stratified(d: Dataset, fit: NuisanceFit, strata: StrataSpec) -> BetaModel:
    """Per-stratum minimiser of :func:`beta_objective`.

    gamma_l = -sum w^2 (ivec'M S ivec) / sum w^2 (ivec'M S M ivec), M = I - 11';
    strata with no clusters or a vanishing denominator get 0.
    """
    u, v = _projections(d, fit)
    w2 = d.weight ** 2
    labels = strata.labels(d)
    num = np.bincount(labels, w2 * u * v, minlength=strata.J)
    den = np.bincount(labels, w2 * v * v, minlength=strata.J)
    gamma = np.zeros(strata.J)
    ok = den > _DEN_FLOOR
    gamma[ok] = -num[ok] / den[ok]
    clamped = tuple(bool(x) for x in np.abs(gamma) > strata.b0)
    if any(clamped):
        log.info("beta clamped to +/-%g in strata %s", strata.b0,
                 [k for k, c in enumerate(clamped) if c])
    return BetaModel(np.clip(gamma, -strata.b0, strata.b0), strata, clamped)
