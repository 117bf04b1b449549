import numpy as np
import pytest
from hypothesis import strategies as st

from mlcdr.data import ClusterData, Dataset
from mlcdr.nuisance import NuisanceFit


def random_dataset(rng, n_clusters=6, max_size=5, p=2, min_size=1, weights=False) -> Dataset:
    clusters = []
    for i in range(n_clusters):
        n = int(rng.integers(min_size, max_size + 1))
        clusters.append(ClusterData(
            f"k{i:03d}",
            rng.normal(size=n),
            rng.integers(0, 2, n),
            rng.normal(size=(n, p)),
            np.array([rng.normal(), float(n)]),
            float(rng.uniform(0.5, 2.0)) if weights else 1.0,
        ))
    return Dataset.from_clusters(clusters)


def random_fit(rng, d: Dataset, clip=0.01) -> NuisanceFit:
    T = d.n_units
    return NuisanceFit(
        rng.normal(size=T), rng.normal(size=T),
        rng.uniform(0.05, 0.95, T), rng.uniform(0.05, 0.95, T),
        np.zeros(T, dtype=np.int64), clip,
    )


@st.composite
def dataset_and_fit(draw, max_clusters=10, max_size=5, min_clusters=1):
    seed = draw(st.integers(0, 2**32 - 1))
    N = draw(st.integers(min_clusters, max_clusters))
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, N, max_size, weights=True)
    return d, random_fit(rng, d)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
