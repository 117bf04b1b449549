"""Overlap and covariate-balance diagnostics for fitted propensities."""
from __future__ import annotations

import numpy as np

from .data import Dataset
from .nuisance import NuisanceFit
from .rng import derive_generator

N_BINS = 20
QUANTILES = (0.0, 0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99, 1.0)
HYPOTHESES = ("H0_no", "H0_e", "H0_pi")


def _summary(p: np.ndarray, clip: float) -> dict:
    counts, _ = np.histogram(p, bins=N_BINS, range=(0.0, 1.0))
    tol = clip * 1e-9
    return {
        "n": int(len(p)),
        "min": float(p.min()) if len(p) else None,
        "max": float(p.max()) if len(p) else None,
        "quantiles": {f"{q:g}": float(np.quantile(p, q)) for q in QUANTILES} if len(p) else {},
        "histogram": counts.tolist(),
        "boundary_mass": int(np.sum((p <= clip + tol) | (p >= 1 - clip - tol))),
    }


def overlap_diagnostic(fit: NuisanceFit, a: np.ndarray | None = None) -> dict:
    """Quantiles and 20-bin histograms on [0, 1] of pi1 and e1, overall and by arm.

    ``boundary_mass`` counts values within ``clip`` of 0 or 1 (i.e. clipped);
    any such mass sets the ``boundary_flag``.  The by-arm split needs ``a``.
    """
    out = {"bins": np.linspace(0.0, 1.0, N_BINS + 1).tolist(), "clip": fit.clip}
    flag = False
    for name in ("pi1", "e1"):
        p = np.asarray(getattr(fit, name), dtype=float)
        block = {"all": _summary(p, fit.clip)}
        if a is not None:
            for arm, label in ((1, "treated"), (0, "control")):
                block[label] = _summary(p[np.asarray(a) == arm], fit.clip)
        flag |= block["all"]["boundary_mass"] > 0
        out[name] = block
    out["boundary_flag"] = bool(flag)
    return out


def _tstat(z: np.ndarray) -> np.ndarray:
    n = len(z)
    sd = z.std(axis=0, ddof=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = z.mean(axis=0) / (sd / np.sqrt(n))
    return np.where(sd > 0, t, 0.0)


def balance_tstats(d: Dataset, fit: NuisanceFit, n_draws: int = 1000, seed: int = 0) -> dict:
    """Median weighted covariate-difference t-statistics over one-unit-per-cluster draws.

    For each draw one unit is sampled per cluster and, per covariate X, the
    t-statistic of ``A X / p - (1 - A) X / (1 - p)`` is formed with p the overall
    treated share (H0_no), e1 (H0_e) or pi1 (H0_pi).
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    X = np.column_stack([d.w_unit, d.c_cluster[d.group]])
    names = list(d.unit_names) + list(d.cluster_names)
    a = d.a.astype(float)
    probs = {"H0_no": np.full(d.n_units, a.mean()), "H0_e": fit.e1, "H0_pi": fit.pi1}
    rng = derive_generator(seed)
    starts = d.offsets[:-1]
    stats = {h: np.empty((n_draws, X.shape[1])) for h in HYPOTHESES}
    for s in range(n_draws):
        pick = starts + np.floor(rng.uniform(size=d.n_clusters) * d.sizes).astype(np.int64)
        xa, aa = X[pick], a[pick][:, None]
        for h in HYPOTHESES:
            p = probs[h][pick][:, None]
            stats[h][s] = _tstat(aa * xa / p - (1 - aa) * xa / (1 - p))
    return {
        "covariates": names,
        "n_draws": n_draws,
        **{h: dict(zip(names, np.median(stats[h], axis=0).tolist())) for h in HYPOTHESES},
    }
