"""Multilevel simulation design and its true nuisance functions.

Each cluster draws C1 ~ N(0,1), C2 ~ Bern(0.7), a treatment random effect V and an
outcome random effect U; units draw W1, W2 ~ N(0,1), W3 ~ Bern(0.3) and

    A ~ Bern(expit(-0.5 + 0.5 W1 - 1(W2 > 1) + 0.5 W3 - 0.25 C1 + C2 + V))
    Y ~ N(3 + (2.1 + W2^2 + 3 W3) A + 2 W1 - C1^2 + W2 C2 + U, 1)

so the average treatment effect is E(2.1 + W2^2 + 3 W3) = 4.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
from numpy.polynomial.hermite_e import hermegauss

from .data import Dataset
from .learners import expit
from .rng import derive_generator

TRUE_ATE = 4.0
RANDOM_EFFECT_FAMILIES = ("normal", "mixture4")
DGP_TAGS = {"table1": "normal", "table3": "mixture4"}
UNIT_NAMES = ("w__w1", "w__w2", "w__w3")
CLUSTER_NAMES = ("c__c1", "c__c2")
QUAD_NODES = 30


@dataclass(frozen=True)
class SimConfig:
    n_clusters: int = 500
    sigma_v: float = 0.0
    sigma_u: float = 0.5
    size_range: tuple[int, int] | None = None
    random_effect_family: str = "normal"
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 2:
            raise ValueError("need at least 2 clusters")
        if self.size_range is None:
            rng = (2000 // self.n_clusters, 3000 // self.n_clusters)
        else:
            rng = tuple(int(s) for s in self.size_range)
        object.__setattr__(self, "size_range", rng)
        lo, hi = rng
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid cluster size range {rng}")
        for s in (self.sigma_v, self.sigma_u):
            if not (np.isfinite(s) and s >= 0):
                raise ValueError("random-effect scales must be finite and >= 0")
        if self.random_effect_family not in RANDOM_EFFECT_FAMILIES:
            raise ValueError(f"unknown random-effect family {self.random_effect_family!r}")

    @classmethod
    def for_dgp(cls, dgp: str, **kwargs) -> "SimConfig":
        if dgp not in DGP_TAGS:
            raise ValueError(f"unknown dgp {dgp!r}; choose from {sorted(DGP_TAGS)}")
        return cls(random_effect_family=DGP_TAGS[dgp], **kwargs)

    @property
    def dgp(self) -> str:
        return {v: k for k, v in DGP_TAGS.items()}[self.random_effect_family]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["size_range"] = list(self.size_range)
        return out


def sample_mixture4(rng: np.random.Generator, size: int) -> np.ndarray:
    """Equal-weight mixture of N(0, 0.5^2), 0.5 t(5), Laplace(0, 0.5), U(-0.25, 0.25)."""
    comp = rng.integers(0, 4, size)
    draws = np.stack(
        [
            rng.normal(0.0, 0.5, size),
            0.5 * rng.standard_t(5, size),
            rng.laplace(0.0, 0.5, size),
            rng.uniform(-0.25, 0.25, size),
        ]
    )
    return draws[comp, np.arange(size)]


def simulate_dgp(cfg: SimConfig, rng: np.random.Generator | None = None) -> Dataset:
    rng = derive_generator(cfg.seed) if rng is None else rng
    N = cfg.n_clusters
    lo, hi = cfg.size_range
    sizes = rng.integers(lo, hi + 1, N)
    C1 = rng.normal(size=N)
    C2 = rng.binomial(1, 0.7, N).astype(float)
    V = rng.normal(0.0, cfg.sigma_v, N) if cfg.sigma_v > 0 else np.zeros(N)
    if cfg.random_effect_family == "normal":
        U = rng.normal(0.0, cfg.sigma_u, N) if cfg.sigma_u > 0 else np.zeros(N)
    else:
        U = sample_mixture4(rng, N)
    group = np.repeat(np.arange(N), sizes)
    T = len(group)
    W1 = rng.normal(size=T)
    W2 = rng.normal(size=T)
    W3 = rng.binomial(1, 0.3, T).astype(float)
    c1, c2 = C1[group], C2[group]
    f = treatment_index(W1, W2, W3, c1, c2)
    A = (rng.uniform(size=T) < expit(f + V[group])).astype(np.int8)
    mean = outcome_mean(A, W1, W2, W3, c1, c2) + U[group]
    Y = mean + rng.normal(size=T)
    width = len(str(N - 1))
    return Dataset(
        [f"c{i:0{width}d}" for i in range(N)],
        sizes,
        Y,
        A,
        np.column_stack([W1, W2, W3]),
        np.column_stack([C1, C2, sizes.astype(float)]),
        np.ones(N),
        UNIT_NAMES,
        CLUSTER_NAMES + ("c__n",),
    )


def treatment_index(W1, W2, W3, C1, C2):
    """Fixed part of the treatment logit."""
    return -0.5 + 0.5 * W1 - (np.asarray(W2) > 1).astype(float) + 0.5 * W3 - 0.25 * C1 + C2


def outcome_mean(a, W1, W2, W3, C1, C2):
    """E[Y | A, X] (the outcome random effect has mean zero)."""
    return 3.0 + (2.1 + W2 ** 2 + 3.0 * W3) * a + 2.0 * W1 - C1 ** 2 + W2 * C2


def _columns(d: Dataset):
    try:
        return tuple(d.unit_column(n) for n in UNIT_NAMES + CLUSTER_NAMES)
    except KeyError as exc:
        raise ValueError(f"dataset lacks simulation covariates: {exc}") from None


def true_outcome_regression(d: Dataset, a) -> np.ndarray:
    W1, W2, W3, C1, C2 = _columns(d)
    return outcome_mean(np.broadcast_to(a, W1.shape).astype(float), W1, W2, W3, C1, C2)


@lru_cache(maxsize=None)
def _gauss_hermite(n: int):
    x, w = hermegauss(n)
    return x, w / np.sqrt(2.0 * np.pi)


def marginal_propensity(f: np.ndarray, sigma_v: float, nodes: int = QUAD_NODES) -> np.ndarray:
    """E[expit(f + V)], V ~ N(0, sigma_v^2), by Gauss-Hermite quadrature."""
    f = np.asarray(f, dtype=float)
    if sigma_v == 0:
        return expit(f)
    x, w = _gauss_hermite(nodes)
    return expit(f[..., None] + sigma_v * x) @ w


def true_propensity(d: Dataset, sigma_v: float, nodes: int = QUAD_NODES) -> np.ndarray:
    """Individual propensity e*(1 | X_ij) with the cluster effect integrated out."""
    return marginal_propensity(treatment_index(*_columns(d)), sigma_v, nodes)


def _log_expit(x):
    return -np.logaddexp(0.0, -x)


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def true_conditional_propensity(d: Dataset, sigma_v: float, nodes: int = QUAD_NODES) -> np.ndarray:
    """P(A_ij = 1 | A_i(-j), X_i) under the exchangeable normal treatment effect.

    The posterior of V given the peers' treatments weights each quadrature node
    by the peers' likelihood; the unit's own factor is left out.
    """
    f = treatment_index(*_columns(d))
    if sigma_v == 0:
        return expit(f)
    x, w = _gauss_hermite(nodes)
    eta = f[:, None] + sigma_v * x[None, :]
    log_p1 = _log_expit(eta)
    log_p0 = _log_expit(-eta)
    a = d.a.astype(bool)[:, None]
    own = np.where(a, log_p1, log_p0)
    total = np.add.reduceat(own, d.offsets[:-1], axis=0)
    peers = total[d.group] - own + np.log(w)[None, :]
    return np.exp(_logsumexp(peers + log_p1, 1) - _logsumexp(peers, 1))
