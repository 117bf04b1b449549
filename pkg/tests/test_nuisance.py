import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import mlcdr.nuisance as nz
from mlcdr.data import ClusterData, split_clusters
from mlcdr.dgp import SimConfig, simulate_dgp, true_conditional_propensity, true_propensity
from mlcdr.learners import LearnerFitError, LearnerSpec
from mlcdr.nuisance import (
    build_cps_features,
    build_outcome_features,
    cps_design,
    fit_nuisances,
    oracle_learners,
    outcome_design,
    undersample_clusters,
)
from mlcdr.rng import derive_generator

from conftest import random_dataset

FAST = LearnerSpec("boosted-stumps", {"rounds": 10})
FAST_G = LearnerSpec("linear-ridge", {"lambda": 1.0})


def _cluster(a, w=None, c=(2.0,)):
    n = len(a)
    w = np.zeros((n, 1)) if w is None else np.asarray(w, float).reshape(n, -1)
    return ClusterData("s", np.zeros(n), a, w, [*c, n])


def test_outcome_features_singleton():
    c = _cluster([1], [[0.3]])
    assert build_outcome_features(c, 0).values.tolist() == [1, 0.3, 2, 1]
    assert build_outcome_features(c, 0, a_override=0).values.tolist() == [0, 0.3, 2, 1]


def test_outcome_features_index_error():
    with pytest.raises(IndexError):
        build_outcome_features(_cluster([1, 0]), 5)
    with pytest.raises(IndexError):
        build_cps_features(_cluster([1, 0]), 2)


def test_cps_peer_share():
    assert build_cps_features(_cluster([1, 0, 1]), 1).values[0] == 1.0
    assert build_cps_features(_cluster([1, 0]), 0).values[0] == 0.0


def test_cps_singleton():
    row = build_cps_features(_cluster([1], [[0.7]]), 0)
    named = dict(zip(row.names, row.values))
    assert named["a_peers"] == 0 and named["w__0_peers"] == 0 and named["has_peers"] == 0


def test_cps_peer_mean_covariates():
    row = build_cps_features(_cluster([1, 0, 0], [[1.0], [2.0], [6.0]]), 0)
    assert dict(zip(row.names, row.values))["w__0_peers"] == 4.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vectorised_designs_match_row_builders(seed):
    d = random_dataset(np.random.default_rng(seed), 5, 4)
    rows_g, rows_g1, rows_pi = [], [], []
    for c in d.clusters:
        for j in range(c.n):
            rows_g.append(build_outcome_features(c, j).values)
            rows_g1.append(build_outcome_features(c, j, 1).values)
            rows_pi.append(build_cps_features(c, j).values)
    np.testing.assert_allclose(outcome_design(d), rows_g, atol=1e-12)
    np.testing.assert_allclose(outcome_design(d, 1), rows_g1, atol=1e-12)
    np.testing.assert_allclose(cps_design(d), rows_pi, atol=1e-12)


def test_undersample_sizes():
    cl = [_cluster([0] * n) for n in (2, 5, 9)]
    assert [c.n for c in undersample_clusters(cl, 2, 0)] == [2, 2, 2]
    cl = [_cluster([0] * n) for n in (2, 3)]
    assert undersample_clusters(cl, 5, 0) == cl


def test_undersample_deterministic(rng):
    d = random_dataset(rng, 8, 7, min_size=3)
    assert undersample_clusters(d.clusters, 2, 4) == undersample_clusters(d.clusters, 2, 4)


def test_undersample_keeps_subset_of_units(rng):
    d = random_dataset(rng, 4, 7, min_size=4)
    for full, sub in zip(d.clusters, undersample_clusters(d.clusters, 3, 1)):
        assert set(sub.y) <= set(full.y) and sub.n == 3


def test_oracle_pass_through():
    cfg = SimConfig(n_clusters=60, sigma_v=1.0)
    d = simulate_dgp(cfg, derive_generator(0))
    g, pi, e = oracle_learners(cfg)
    fit = fit_nuisances(d, split_clusters(d, 2, 0), g, pi, e, clip=0.01)
    np.testing.assert_array_equal(fit.e1, np.clip(true_propensity(d, 1.0), 0.01, 0.99))
    np.testing.assert_array_equal(fit.pi1, np.clip(true_conditional_propensity(d, 1.0), 0.01, 0.99))
    assert fit.g1[0] - fit.g0[0] == pytest.approx(2.1 + d.w_unit[0, 1] ** 2 + 3 * d.w_unit[0, 2])


def test_clip_applied_to_extreme_propensity():
    cfg = SimConfig(n_clusters=4, size_range=(1, 1))
    d = simulate_dgp(cfg, derive_generator(0))
    w = d.w_unit.copy()
    w[:, 0] = 40.0  # logit near 20, raw propensity 0.999...
    d = type(d)(d.cluster_ids, d.sizes, d.y, d.a, w, d.c_cluster, d.weight, d.unit_names,
                d.cluster_names)
    fit = fit_nuisances(d, split_clusters(d, 2, 0), *oracle_learners(cfg), clip=0.05)
    np.testing.assert_array_equal(fit.e1, 0.95)


def test_unknown_oracle_dgp(rng):
    d = random_dataset(rng, 4)
    with pytest.raises(ValueError):
        fit_nuisances(d, split_clusters(d, 2, 0), LearnerSpec("oracle", {"dgp": "table9"}),
                      None, None)


def test_cross_fitting_honesty(rng):
    d = random_dataset(rng, 20, 4)
    folds = split_clusters(d, 2, 1)
    fit = fit_nuisances(d, folds, FAST_G, FAST, FAST)
    np.testing.assert_array_equal(fit.fold_trained_on, folds.folds_for(d)[d.group])
    # perturbing a fold's own clusters cannot move its predictions
    own = folds.folds_for(d)[d.group] == 0
    y2 = d.y.copy()
    y2[own] += 100.0
    a2 = d.a.copy()
    a2[own] = 1 - a2[own]
    d2 = type(d)(d.cluster_ids, d.sizes, y2, a2, d.w_unit, d.c_cluster, d.weight, d.unit_names,
                 d.cluster_names)
    fit2 = fit_nuisances(d2, folds, FAST_G, FAST, FAST)
    for name in ("g0", "g1", "e1"):
        np.testing.assert_array_equal(getattr(fit, name)[own], getattr(fit2, name)[own])
    assert not np.array_equal(fit.g0[~own], fit2.g0[~own])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.001, 0.3), st.sampled_from(["knn", "logistic-ridge"]))
def test_clipping_bounds(seed, clip, kind):
    d = random_dataset(np.random.default_rng(seed), 8, 4)
    spec = LearnerSpec(kind)
    fit = fit_nuisances(d, split_clusters(d, 2, seed), FAST_G, spec, spec, clip)
    for p in (fit.pi1, fit.e1):
        assert np.all((p >= clip) & (p <= 1 - clip))


def test_learner_error_names_fold(rng, monkeypatch):
    d = random_dataset(rng, 6)

    def broken(*args, **kwargs):
        raise LearnerFitError("boom")

    monkeypatch.setattr(nz, "fit_learner", broken)
    with pytest.raises(LearnerFitError, match="fold 0"):
        fit_nuisances(d, split_clusters(d, 2, 0), FAST_G, None, None)


def test_undersampled_training_with_repeats(rng):
    d = random_dataset(rng, 16, 8, min_size=2)
    folds = split_clusters(d, 2, 0)
    a = fit_nuisances(d, folds, FAST_G, FAST, None, undersample=2, seed=3, undersample_repeats=5)
    b = fit_nuisances(d, folds, FAST_G, FAST, None, undersample=2, seed=3, undersample_repeats=5)
    assert a.pi1.tobytes() == b.pi1.tobytes()
    np.testing.assert_array_equal(a.e1, 0.5)


def test_deterministic_fit(rng):
    d = random_dataset(rng, 12, 4)
    folds = split_clusters(d, 3, 2)
    a = fit_nuisances(d, folds, FAST, FAST, FAST)
    b = fit_nuisances(d, folds, FAST, FAST, FAST)
    for name in ("g0", "g1", "pi1", "e1"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
