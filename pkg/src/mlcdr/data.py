"""Clustered data model: ingestion, validation and cluster-level fold splitting.

A :class:`Dataset` keeps every unit in flat arrays ordered cluster by cluster,
which is what the vectorised estimators work on.  :class:`ClusterData` is the
per-cluster view used by the small, readable reference routines.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

UNIT_PREFIX = "w__"
CLUSTER_PREFIX = "c__"
SIZE_COLUMN = "c__n"
REQUIRED_COLUMNS = ("cluster_id", "y", "a")
_MISSING = {"", "na", "nan", "null", "none"}


class DataError(ValueError):
    """Base class for problems with input data."""


class SchemaError(DataError):
    pass


class ConsistencyError(DataError):
    pass


class ParseError(DataError):
    pass


def _as_float_array(x, ndim: int) -> np.ndarray:
    arr = np.array(x, dtype=float)
    if arr.ndim != ndim:
        raise DataError(f"expected a {ndim}-d array, got shape {arr.shape}")
    return arr


@dataclass(frozen=True, eq=False)
class ClusterData:
    """One cluster: outcomes, treatments, unit covariates and cluster covariates."""

    cluster_id: str
    y: np.ndarray
    a: np.ndarray
    w_unit: np.ndarray
    c_cluster: np.ndarray
    weight: float = 1.0

    def __post_init__(self):
        y = _as_float_array(self.y, 1)
        a = np.asarray(self.a)
        w = np.array(self.w_unit, dtype=float)
        if w.ndim == 1:
            w = w.reshape(len(y), -1) if len(y) else w.reshape(0, 0)
        c = _as_float_array(self.c_cluster, 1)
        n = len(y)
        if n < 1:
            raise DataError(f"cluster {self.cluster_id!r} has no units")
        if a.shape != (n,) or w.ndim != 2 or w.shape[0] != n:
            raise DataError(
                f"cluster {self.cluster_id!r}: y, a and w_unit must all have {n} rows"
            )
        if not np.all((a == 0) | (a == 1)):
            raise DataError(f"cluster {self.cluster_id!r}: treatments must be 0/1")
        weight = float(self.weight)
        if not (weight >= 0 and math.isfinite(weight)):
            raise DataError(f"cluster {self.cluster_id!r}: weight must be finite and >= 0")
        for arr in (y, w, c):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"cluster {self.cluster_id!r}: non-finite values")
        for name, arr in (("y", y), ("a", a.astype(np.int8)), ("w_unit", w), ("c_cluster", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "cluster_id", str(self.cluster_id))
        object.__setattr__(self, "weight", weight)

    @property
    def n(self) -> int:
        return len(self.y)

    def __eq__(self, other):
        if not isinstance(other, ClusterData):
            return NotImplemented
        return (
            self.cluster_id == other.cluster_id
            and self.weight == other.weight
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.w_unit, other.w_unit)
            and np.array_equal(self.c_cluster, other.c_cluster)
        )

    __hash__ = None


class Dataset:
    """Immutable collection of clusters stored as flat, cluster-contiguous arrays.

    ``c_cluster`` always ends with the cluster size column ``c__n``.  It holds
    the size at ingestion, so subsampled clusters keep their original value.
    """

    def __init__(
        self,
        cluster_ids: Sequence[str],
        sizes: Sequence[int],
        y: np.ndarray,
        a: np.ndarray,
        w_unit: np.ndarray,
        c_cluster: np.ndarray,
        weight: np.ndarray,
        unit_names: Sequence[str],
        cluster_names: Sequence[str],
    ):
        self.cluster_ids = tuple(str(c) for c in cluster_ids)
        self.sizes = np.asarray(sizes, dtype=np.int64)
        self.y = np.asarray(y, dtype=float)
        self.a = np.asarray(a, dtype=np.int8)
        self.w_unit = np.asarray(w_unit, dtype=float).reshape(len(self.y), len(unit_names))
        self.c_cluster = np.asarray(c_cluster, dtype=float).reshape(
            len(self.cluster_ids), len(cluster_names)
        )
        self.weight = np.asarray(weight, dtype=float)
        self.unit_names = tuple(unit_names)
        self.cluster_names = tuple(cluster_names)
        self._check()
        for arr in (self.sizes, self.y, self.a, self.w_unit, self.c_cluster, self.weight):
            arr.setflags(write=False)

    def _check(self):
        N = len(self.cluster_ids)
        if N == 0:
            raise DataError("dataset has no clusters")
        if len(set(self.cluster_ids)) != N:
            raise DataError("cluster ids must be unique")
        if self.sizes.shape != (N,) or np.any(self.sizes < 1):
            raise DataError("every cluster needs at least one unit")
        if self.sizes.sum() != len(self.y) or len(self.a) != len(self.y):
            raise DataError("cluster sizes do not match the number of unit rows")
        if self.weight.shape != (N,) or np.any(self.weight < 0):
            raise DataError("weights must be one nonnegative value per cluster")
        if not np.all((self.a == 0) | (self.a == 1)):
            raise DataError("treatments must be 0/1")
        if not self.cluster_names or self.cluster_names[-1] != SIZE_COLUMN:
            raise DataError(f"cluster covariates must end with {SIZE_COLUMN!r}")
        if len(set(self.unit_names) | set(self.cluster_names)) != len(self.unit_names) + len(
            self.cluster_names
        ):
            raise DataError("covariate names must be unique")
        for arr in (self.y, self.w_unit, self.c_cluster, self.weight):
            if not np.all(np.isfinite(arr)):
                raise DataError("non-finite values in dataset")

    # -- construction -----------------------------------------------------
    @classmethod
    def from_arrays(
        cls,
        cluster_id: Sequence,
        y,
        a,
        w_unit=None,
        c_cluster=None,
        weight=None,
        unit_names: Sequence[str] | None = None,
        cluster_names: Sequence[str] | None = None,
    ) -> "Dataset":
        """Build from unit-level arrays (one row per unit), grouping by ``cluster_id``.

        Rows are grouped by first appearance of each id, preserving the
        within-cluster order.  ``c_cluster`` and ``weight`` are given per unit
        and must be constant within each cluster.  ``c__n`` is appended.
        """
        ids = np.asarray([str(c) for c in cluster_id])
        T = len(ids)
        y = np.asarray(y, dtype=float)
        a = np.asarray(a)
        w_unit = np.zeros((T, 0)) if w_unit is None else np.asarray(w_unit, dtype=float).reshape(T, -1)
        c_cluster = (
            np.zeros((T, 0)) if c_cluster is None else np.asarray(c_cluster, dtype=float).reshape(T, -1)
        )
        weight = np.ones(T) if weight is None else np.asarray(weight, dtype=float)
        unit_names = list(unit_names or [f"{UNIT_PREFIX}{k}" for k in range(w_unit.shape[1])])
        cluster_names = list(cluster_names or [f"{CLUSTER_PREFIX}{k}" for k in range(c_cluster.shape[1])])
        if len(y) != T or len(a) != T or len(weight) != T:
            raise DataError("unit-level arrays must have equal length")
        if not np.all((a == 0) | (a == 1)):
            bad = int(np.flatnonzero(~((a == 0) | (a == 1)))[0]) + 1
            raise DataError(f"treatment must be 0/1 (row {bad})")

        order_ids, first = np.unique(ids, return_index=True)
        order_ids = order_ids[np.argsort(first)]
        code = {cid: k for k, cid in enumerate(order_ids)}
        group = np.fromiter((code[c] for c in ids), dtype=np.int64, count=T)
        perm = np.argsort(group, kind="stable")
        group = group[perm]
        sizes = np.bincount(group, minlength=len(order_ids))
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])

        c_sorted = c_cluster[perm]
        w_sorted = weight[perm]
        c_first = c_sorted[starts]
        if c_cluster.shape[1]:
            varying = np.any(c_sorted != c_first[group], axis=1)
            if np.any(varying):
                cid = order_ids[group[np.flatnonzero(varying)[0]]]
                raise ConsistencyError(f"cluster covariates vary within cluster {cid!r}")
        if np.any(w_sorted != w_sorted[starts][group]):
            cid = order_ids[group[np.flatnonzero(w_sorted != w_sorted[starts][group])[0]]]
            raise ConsistencyError(f"weight varies within cluster {cid!r}")

        if SIZE_COLUMN in cluster_names:
            k = cluster_names.index(SIZE_COLUMN)
            if not np.array_equal(c_first[:, k], sizes):
                raise ConsistencyError(f"{SIZE_COLUMN} does not match cluster size")
            c_first = np.delete(c_first, k, axis=1)
            del cluster_names[k]
        c_first = np.column_stack([c_first, sizes.astype(float)])
        return cls(
            order_ids,
            sizes,
            y[perm],
            a[perm],
            w_unit[perm],
            c_first,
            w_sorted[starts],
            unit_names,
            cluster_names + [SIZE_COLUMN],
        )

    @classmethod
    def from_clusters(
        cls,
        clusters: Iterable[ClusterData],
        unit_names: Sequence[str] | None = None,
        cluster_names: Sequence[str] | None = None,
    ) -> "Dataset":
        clusters = list(clusters)
        if not clusters:
            raise DataError("dataset has no clusters")
        p = clusters[0].w_unit.shape[1]
        q = len(clusters[0].c_cluster)
        if any(c.w_unit.shape[1] != p or len(c.c_cluster) != q for c in clusters):
            raise DataError("all clusters must share the covariate layout")
        unit_names = list(unit_names or [f"{UNIT_PREFIX}{k}" for k in range(p)])
        if cluster_names is None:
            cluster_names = [f"{CLUSTER_PREFIX}{k}" for k in range(q - 1)] + [SIZE_COLUMN]
        return cls(
            [c.cluster_id for c in clusters],
            [c.n for c in clusters],
            np.concatenate([c.y for c in clusters]),
            np.concatenate([c.a for c in clusters]),
            np.vstack([c.w_unit for c in clusters]),
            np.vstack([c.c_cluster for c in clusters]),
            np.array([c.weight for c in clusters]),
            unit_names,
            cluster_names,
        )

    # -- views ------------------------------------------------------------
    @property
    def n_clusters(self) -> int:
        return len(self.cluster_ids)

    @property
    def n_units(self) -> int:
        return len(self.y)

    @cached_property
    def offsets(self) -> np.ndarray:
        """Start index of each cluster in the unit arrays, plus the total at the end."""
        out = np.concatenate([[0], np.cumsum(self.sizes)])
        out.setflags(write=False)
        return out

    @cached_property
    def group(self) -> np.ndarray:
        """Cluster index of every unit."""
        out = np.repeat(np.arange(self.n_clusters), self.sizes)
        out.setflags(write=False)
        return out

    @cached_property
    def clusters(self) -> tuple[ClusterData, ...]:
        o = self.offsets
        return tuple(
            ClusterData(
                self.cluster_ids[i],
                self.y[o[i] : o[i + 1]],
                self.a[o[i] : o[i + 1]],
                self.w_unit[o[i] : o[i + 1]],
                self.c_cluster[i],
                self.weight[i],
            )
            for i in range(self.n_clusters)
        )

    @property
    def covariate_names(self) -> dict[str, tuple[str, ...]]:
        return {"unit": self.unit_names, "cluster": self.cluster_names}

    def cluster_column(self, name: str) -> np.ndarray:
        if name not in self.cluster_names:
            raise KeyError(f"no cluster covariate named {name!r}")
        return self.c_cluster[:, self.cluster_names.index(name)]

    def unit_column(self, name: str) -> np.ndarray:
        if name in self.unit_names:
            return self.w_unit[:, self.unit_names.index(name)]
        return self.cluster_column(name)[self.group]

    def subset(self, idx: Sequence[int]) -> "Dataset":
        """Clusters ``idx`` (in the given order) as a new dataset."""
        idx = np.asarray(idx, dtype=np.int64)
        o = self.offsets
        rows = np.concatenate([np.arange(o[i], o[i + 1]) for i in idx]) if len(idx) else np.array([], int)
        return Dataset(
            [self.cluster_ids[i] for i in idx],
            self.sizes[idx],
            self.y[rows],
            self.a[rows],
            self.w_unit[rows],
            self.c_cluster[idx],
            self.weight[idx],
            self.unit_names,
            self.cluster_names,
        )

    def sorted_by_id(self) -> "Dataset":
        return self.subset(np.argsort(np.array(self.cluster_ids), kind="stable"))

    def with_weight(self, weight: "str | np.ndarray") -> "Dataset":
        """Copy with analysis weights replaced by a cluster column name or a per-cluster array."""
        w = self.cluster_column(weight) if isinstance(weight, str) else np.asarray(weight, float)
        return Dataset(
            self.cluster_ids, self.sizes, self.y, self.a, self.w_unit, self.c_cluster, w,
            self.unit_names, self.cluster_names,
        )

    def __len__(self):
        return self.n_clusters

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.cluster_ids == other.cluster_ids
            and self.unit_names == other.unit_names
            and self.cluster_names == other.cluster_names
            and np.array_equal(self.sizes, other.sizes)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.a, other.a)
            and np.array_equal(self.w_unit, other.w_unit)
            and np.array_equal(self.c_cluster, other.c_cluster)
            and np.array_equal(self.weight, other.weight)
        )

    __hash__ = None

    def __repr__(self):
        return f"Dataset(n_clusters={self.n_clusters}, n_units={self.n_units})"


# -- CSV I/O --------------------------------------------------------------


def _parse_float(text: str, column: str, row: int) -> float:
    if text.strip().lower() in _MISSING:
        raise ParseError(f"missing value in column {column!r} at row {row}")
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"non-numeric value {text!r} in column {column!r} at row {row}") from None
    if not math.isfinite(value):
        raise ParseError(f"non-finite value in column {column!r} at row {row}")
    return value


def load_dataset(path: str | Path, schema: Mapping[str, str] | None = None) -> Dataset:
    """Read a clustered dataset from CSV.

    Columns: ``cluster_id, y, a`` (required), optional ``weight``, unit
    covariates prefixed ``w__`` and cluster covariates prefixed ``c__``.
    ``schema`` may rename the required columns, e.g. ``{"y": "score"}``.
    Row numbers in error messages count data rows from 1.
    """
    schema = dict(schema or {})
    col = {k: schema.get(k, k) for k in (*REQUIRED_COLUMNS, "weight")}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError("empty file: header row missing") from None
        rows = list(reader)
    for key in REQUIRED_COLUMNS:
        if col[key] not in header:
            raise SchemaError(f"missing required column {col[key]!r}")
    if len(set(header)) != len(header):
        raise SchemaError("duplicate column names")
    pos = {h: k for k, h in enumerate(header)}
    unit_cols = [h for h in header if h.startswith(UNIT_PREFIX)]
    cluster_cols = [h for h in header if h.startswith(CLUSTER_PREFIX)]
    has_weight = col["weight"] in pos

    T = len(rows)
    ids, y, a, wts = [], np.empty(T), np.empty(T, dtype=np.int8), np.ones(T)
    W = np.empty((T, len(unit_cols)))
    C = np.empty((T, len(cluster_cols)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise ParseError(f"row {r} has {len(row)} fields, expected {len(header)}")
        cid = row[pos[col["cluster_id"]]].strip()
        if cid.lower() in _MISSING:
            raise ParseError(f"missing cluster_id at row {r}")
        ids.append(cid)
        y[r - 1] = _parse_float(row[pos[col["y"]]], col["y"], r)
        av = _parse_float(row[pos[col["a"]]], col["a"], r)
        if av not in (0.0, 1.0):
            raise DataError(f"treatment {col['a']!r} must be 0 or 1, got {row[pos[col['a']]]!r} at row {r}")
        a[r - 1] = int(av)
        if has_weight:
            wts[r - 1] = _parse_float(row[pos[col["weight"]]], col["weight"], r)
            if wts[r - 1] < 0:
                raise DataError(f"negative weight at row {r}")
        for k, h in enumerate(unit_cols):
            W[r - 1, k] = _parse_float(row[pos[h]], h, r)
        for k, h in enumerate(cluster_cols):
            C[r - 1, k] = _parse_float(row[pos[h]], h, r)
    if T == 0:
        raise DataError("file has no data rows")
    return Dataset.from_arrays(ids, y, a, W, C, wts, unit_cols, cluster_cols)


def write_csv(d: Dataset, path: str | Path) -> None:
    """Write ``d`` in the ingestion format (``c__n`` is implied and omitted)."""
    cluster_cols = [c for c in d.cluster_names if c != SIZE_COLUMN]
    kc = [d.cluster_names.index(c) for c in cluster_cols]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["cluster_id", "y", "a", "weight", *d.unit_names, *cluster_cols])
        for i, c in enumerate(d.clusters):
            cvals = [repr(float(d.c_cluster[i, k])) for k in kc]
            for j in range(c.n):
                out.writerow(
                    [c.cluster_id, repr(float(c.y[j])), int(c.a[j]), repr(c.weight)]
                    + [repr(float(v)) for v in c.w_unit[j]]
                    + cvals
                )


# -- validation -----------------------------------------------------------


@dataclass
class ValidationReport:
    n_clusters: int
    n_units: int
    singleton_count: int
    min_size: int
    max_size: int
    fraction_treated: float
    all_treated_clusters: int
    all_control_clusters: int
    flags: list[str] = field(default_factory=list)
    degenerate_strata: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def validate_dataset(d: Dataset, n_strata: int = 3) -> ValidationReport:
    """Tally overlap red flags without touching ``d``.

    Strata are the cluster-size strata of :func:`mlcdr.covariance.default_strata`.
    """
    from .covariance import default_strata

    treated = np.add.reduceat(d.a.astype(np.int64), d.offsets[:-1])
    frac = float(d.a.mean())
    flags = []
    if treated.sum() == 0:
        flags.append("no treated units")
    if treated.sum() == d.n_units:
        flags.append("no control units")
    singletons = int(np.sum(d.sizes == 1))
    if singletons:
        flags.append(f"{singletons} singleton clusters (no peers)")
    strata = default_strata(d, n_strata)
    labels = strata.labels(d)
    degenerate = []
    for ell in range(strata.J):
        units = np.isin(d.group, np.flatnonzero(labels == ell))
        if not units.any():
            continue
        share = float(d.a[units].mean())
        if share in (0.0, 1.0):
            degenerate.append({"stratum": ell, "all": "treated" if share == 1.0 else "control"})
    if degenerate:
        flags.append("strata with a single treatment arm")
    return ValidationReport(
        n_clusters=d.n_clusters,
        n_units=d.n_units,
        singleton_count=singletons,
        min_size=int(d.sizes.min()),
        max_size=int(d.sizes.max()),
        fraction_treated=frac,
        all_treated_clusters=int(np.sum(treated == d.sizes)),
        all_control_clusters=int(np.sum(treated == 0)),
        flags=flags,
        degenerate_strata=degenerate,
    )


# -- folds ----------------------------------------------------------------


@dataclass(frozen=True)
class FoldAssignment:
    k: int
    fold_of: Mapping[str, int]

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least 2 folds")
        counts = np.bincount(list(self.fold_of.values()), minlength=self.k)
        if len(counts) != self.k or np.any(counts == 0):
            raise ValueError("every fold must be nonempty and indices must lie in [0, k)")

    def folds_for(self, d: Dataset) -> np.ndarray:
        """Fold index of each cluster of ``d`` in dataset order."""
        try:
            return np.array([self.fold_of[c] for c in d.cluster_ids], dtype=np.int64)
        except KeyError as exc:
            raise DataError(f"cluster {exc.args[0]!r} has no fold") from None

    def members(self, fold: int) -> list[str]:
        return sorted(c for c, f in self.fold_of.items() if f == fold)


def split_clusters(d: Dataset, k: int = 2, seed: int = 0) -> FoldAssignment:
    """Uniformly random cluster-level partition into ``k`` folds of near-equal size.

    Ids are sorted before shuffling so the result does not depend on the order
    of clusters in ``d``.
    """
    k = int(k)
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > d.n_clusters:
        raise ValueError(f"cannot split {d.n_clusters} clusters into {k} folds")
    ids = sorted(d.cluster_ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    fold_of = {ids[p]: pos % k for pos, p in enumerate(perm)}
    return FoldAssignment(k, fold_of)
