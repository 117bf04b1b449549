"""Monte Carlo harness: replicated simulate-and-estimate runs, ICCs and efficiency sweeps."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from joblib import Parallel, delayed

from .data import Dataset
from .dgp import TRUE_ATE, SimConfig, simulate_dgp, true_outcome_regression, true_propensity
from .estimators import confidence_interval, estimate, median_aggregate
from .learners import DEFAULT_CLIP, LearnerSpec
from .nuisance import oracle_learners
from .rng import derive_generator, derive_seed

# strata used for beta at the cluster counts of the reference design
_STRATA_BY_N = {25: 1, 50: 2, 100: 3, 250: 5, 500: 3}


def default_strata_count(n_clusters: int) -> int:
    if n_clusters in _STRATA_BY_N:
        return _STRATA_BY_N[n_clusters]
    return 1 if n_clusters < 50 else 3


def thread_count(threads: int | None = None) -> int:
    env = os.environ.get("MLCDR_THREADS")
    if env:
        return max(1, int(env))
    return max(1, threads or 1)


# -- ICC --------------------------------------------------------------------


def icc_continuous(sigma_u: float) -> float:
    """Outcome ICC of a unit-variance normal model with cluster effect sd ``sigma_u``."""
    if sigma_u < 0:
        raise ValueError("sigma_u must be >= 0")
    s2 = sigma_u * sigma_u
    return s2 / (1.0 + s2)


def icc_binary_anova(residuals: Sequence[np.ndarray]) -> float:
    """One-way ANOVA ICC estimate, (MS_b - MS_w) / (MS_b + (n_0 - 1) MS_w)."""
    residuals = [np.asarray(r, dtype=float) for r in residuals]
    N = len(residuals)
    sizes = np.array([len(r) for r in residuals], dtype=float)
    total = sizes.sum()
    if N < 2 or total < 2:
        raise ValueError("ICC needs at least 2 clusters and 2 units")
    if total == N:
        raise ValueError("ICC is undefined when every cluster has one unit")
    sums = np.array([r.sum() for r in residuals])
    sq = sum(float((r ** 2).sum()) for r in residuals)
    between = float(np.sum(sums ** 2 / sizes))
    ms_w = (sq - between) / (total - N)
    ms_b = (between - sums.sum() ** 2 / total) / (N - 1)
    n0 = (total - np.sum(sizes ** 2) / total) / (N - 1)
    return float((ms_b - ms_w) / (ms_b + (n0 - 1) * ms_w))


def split_by_cluster(d: Dataset, values: np.ndarray) -> list[np.ndarray]:
    return np.split(np.asarray(values), d.offsets[1:-1])


def treatment_residuals(d: Dataset, e1: np.ndarray) -> np.ndarray:
    """A - e(A | X): one minus the probability of the arm actually received, signed by arm."""
    return d.a - np.where(d.a == 1, e1, 1.0 - e1)


def simulated_icc(d: Dataset, cfg: SimConfig) -> tuple[float, float]:
    """(ICC_A, ICC_Y) by ANOVA on residuals from the true nuisance functions."""
    e1 = true_propensity(d, cfg.sigma_v)
    ra = treatment_residuals(d, e1)
    ry = d.y - np.where(d.a == 1, true_outcome_regression(d, 1), true_outcome_regression(d, 0))
    return (icc_binary_anova(split_by_cluster(d, ra)), icc_binary_anova(split_by_cluster(d, ry)))


# -- estimator configs ------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    """How one replication is estimated; ``learners=None`` means oracle nuisances."""

    method: str = "proposed"
    learners: Mapping[str, LearnerSpec] | None = None
    n_strata: int | None = None
    folds: int = 2
    splits: int = 1
    clip: float = DEFAULT_CLIP
    undersample: int | str | None = None
    undersample_repeats: int = 1
    level: float = 0.95

    def __call__(self, d: Dataset, seed: int, cfg: SimConfig):
        if self.learners is None:
            g, pi, e = oracle_learners(cfg)
        else:
            g, pi, e = self.learners["g"], self.learners["pi"], self.learners["e"]
        m = int(d.sizes.min()) if self.undersample == "min" else self.undersample
        J = self.n_strata if self.n_strata is not None else default_strata_count(cfg.n_clusters)
        ests = [
            estimate(d, self.method, self.folds, g, pi, e, J, self.clip, derive_seed(seed, s),
                     m, self.undersample_repeats)
            for s in range(self.splits)
        ]
        return ests[0] if self.splits == 1 else median_aggregate(ests)

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.learners is not None:
            out["learners"] = {k: v.to_dict() for k, v in self.learners.items()}
        return out


EstimatorFn = Callable[[Dataset, int, SimConfig], object]


# -- Monte Carlo ------------------------------------------------------------


class ReplicationError(RuntimeError):
    pass


@dataclass
class MetricsRow:
    scenario: str
    estimator: str
    bias: float
    se: float
    coverage: float
    ci_width: float
    reps: int

    def __post_init__(self):
        if not 0 <= self.coverage <= 1 or self.se < 0:
            raise ValueError("coverage must lie in [0, 1] and se must be >= 0")


@dataclass
class MetricsTable:
    rows: list[MetricsRow]
    taus: dict[str, np.ndarray] = field(default_factory=dict, repr=False)
    icc_a: float | None = None
    icc_y: float | None = None
    config: dict = field(default_factory=dict)

    def row(self, estimator: str) -> MetricsRow:
        return next(r for r in self.rows if r.estimator == estimator)

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        out.writerow(["scenario", "bias_x100", "se_x100", "coverage"])
        for r in self.rows:
            out.writerow([r.scenario, f"{100 * r.bias:.2f}", f"{100 * r.se:.2f}", f"{r.coverage:.3f}"])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "icc_a": self.icc_a,
            "icc_y": self.icc_y,
            "rows": [asdict(r) for r in self.rows],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _one_replication(cfg, estimators, r, seed, level, with_icc):
    d = simulate_dgp(cfg, derive_generator(seed, r))
    out = {}
    for k, (name, fn) in enumerate(estimators.items()):
        try:
            e = fn(d, derive_seed(seed, r, k), cfg)
        except Exception as exc:  # noqa: BLE001 - re-raised with the replication index
            raise ReplicationError(f"replication {r}, estimator {name}: {exc}") from exc
        lo, hi = confidence_interval(e, level)
        out[name] = (e.tau, lo, hi)
    icc = simulated_icc(d, cfg) if with_icc else (np.nan, np.nan)
    return out, icc


def _scenario(cfg: SimConfig) -> str:
    return f"N={cfg.n_clusters} ({cfg.sigma_v:.1f},{cfg.sigma_u:.1f}) {cfg.dgp}"


def run_monte_carlo(
    cfg: SimConfig,
    estimators: Mapping[str, EstimatorFn] | EstimatorFn,
    reps: int = 200,
    true_tau: float = TRUE_ATE,
    seed: int = 0,
    level: float = 0.95,
    n_jobs: int = 1,
    with_icc: bool = False,
) -> MetricsTable:
    """Simulate ``reps`` datasets, run every estimator on each, and tabulate metrics.

    Replication r draws from a generator keyed by ``(seed, r)`` so results do
    not depend on ``n_jobs``.
    """
    if reps < 2:
        raise ValueError("reps must be >= 2")
    if callable(estimators) and not isinstance(estimators, Mapping):
        estimators = {"estimator": estimators}
    jobs = (delayed(_one_replication)(cfg, estimators, r, seed, level, with_icc) for r in range(reps))
    results = list(Parallel(n_jobs=n_jobs)(jobs)) if n_jobs > 1 else [
        _one_replication(cfg, estimators, r, seed, level, with_icc) for r in range(reps)
    ]
    rows, taus = [], {}
    for name in estimators:
        arr = np.array([res[name] for res, _ in results])
        tau, lo, hi = arr.T
        taus[name] = tau
        rows.append(MetricsRow(
            scenario=f"{_scenario(cfg)} {name}",
            estimator=name,
            bias=float(tau.mean() - true_tau),
            se=float(tau.std(ddof=1)),
            coverage=float(np.mean((lo <= true_tau) & (true_tau <= hi))),
            ci_width=float(np.mean(hi - lo)),
            reps=reps,
        ))
    icc = np.array([ic for _, ic in results])
    table = MetricsTable(rows, taus, config={"sim": cfg.to_dict(), "reps": reps, "seed": seed,
                                              "level": level, "true_tau": true_tau})
    if with_icc:
        table.icc_a, table.icc_y = (float(x) for x in icc.mean(axis=0))
    for name, fn in estimators.items():
        if isinstance(fn, EstimatorConfig):
            table.config.setdefault("estimators", {})[name] = fn.to_dict()
    return table


def oracle_pair(n_strata: int | None = None) -> dict[str, EstimatorConfig]:
    """Proposed and AIPW estimators with true nuisance functions."""
    return {
        "tau_hat": EstimatorConfig("proposed", n_strata=n_strata),
        "tau_bar": EstimatorConfig("aipw"),
    }


def efficiency_sweep(
    grid: Sequence[tuple[float, float]],
    reps: int = 200,
    n_clusters: int = 500,
    seed: int = 0,
    dgp: str = "table1",
    n_jobs: int = 1,
) -> list[dict]:
    """Relative efficiency Var(tau_bar) / Var(tau_hat) with oracle nuisances per (sigma_v, sigma_u)."""
    if reps < 2:
        raise ValueError("reps must be >= 2")
    out = []
    for k, (sv, su) in enumerate(grid):
        cfg = SimConfig.for_dgp(dgp, n_clusters=n_clusters, sigma_v=float(sv), sigma_u=float(su))
        table = run_monte_carlo(cfg, oracle_pair(), reps, seed=derive_seed(seed, k),
                                n_jobs=n_jobs, with_icc=True)
        rho = float(np.var(table.taus["tau_bar"], ddof=1) / np.var(table.taus["tau_hat"], ddof=1))
        icc_y = icc_continuous(su) if cfg.random_effect_family == "normal" else table.icc_y
        out.append({"sigma_v": float(sv), "sigma_u": float(su), "icc_a": table.icc_a,
                    "icc_y": icc_y, "rho": rho})
    return out


def parse_grid(spec: str) -> list[float]:
    """``"start:stop:step"`` (inclusive) or a comma list."""
    if ":" in spec:
        start, stop, step = (float(x) for x in spec.split(":"))
        if step <= 0:
            raise ValueError("grid step must be positive")
        n = int(np.floor((stop - start) / step + 1e-9)) + 1
        return [round(start + i * step, 10) for i in range(n)]
    return [float(x) for x in spec.split(",") if x.strip()]


def sweep_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(["sigma_v", "sigma_u", "icc_a", "icc_y", "rho"])
    for r in rows:
        out.writerow([f"{r['sigma_v']:g}", f"{r['sigma_u']:g}", f"{r['icc_a']:.4f}",
                      f"{r['icc_y']:.4f}", f"{r['rho']:.4f}"])
    return buf.getvalue()


def sweep_svg(rows: Sequence[dict], cell: int = 28) -> str:
    """Heat map of log(rho): red where the proposed estimator is more efficient, cyan otherwise."""
    sv = sorted({r["sigma_v"] for r in rows})
    su = sorted({r["sigma_u"] for r in rows})
    w, h = cell * len(sv) + 60, cell * len(su) + 40
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}">']
    lim = max(1e-9, max(abs(np.log(r["rho"])) for r in rows))
    for r in rows:
        x = 50 + cell * sv.index(r["sigma_v"])
        y = 10 + cell * (len(su) - 1 - su.index(r["sigma_u"]))
        t = float(np.clip(np.log(r["rho"]) / lim, -1, 1))
        rgb = (255, int(255 * (1 - t)), int(255 * (1 - t))) if t >= 0 else (
            int(255 * (1 + t)), 255, 255)
        parts.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" '
                     f'fill="rgb{rgb}"><title>sigma_v={r["sigma_v"]:g} sigma_u={r["sigma_u"]:g} '
                     f'rho={r["rho"]:.3f}</title></rect>')
    parts.append(f'<text x="50" y="{h - 8}" font-size="11">sigma_v (x) / sigma_u (y)</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def with_sim(cfg: SimConfig, **changes) -> SimConfig:
    return replace(cfg, **changes)
