import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mlcdr.data import (
    ClusterData,
    ConsistencyError,
    DataError,
    Dataset,
    FoldAssignment,
    ParseError,
    SchemaError,
    load_dataset,
    split_clusters,
    validate_dataset,
    write_csv,
)

from conftest import random_dataset


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_groups_two_clusters(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a,w__x,c__region\ns1,1.0,1,0.1,3\ns1,2.0,0,0.2,3\n"
                       "s2,0.5,0,0.3,4\ns2,1.5,1,0.4,4\n")
    d = load_dataset(p)
    assert d.n_clusters == 2
    assert d.sizes.tolist() == [2, 2]
    assert d.cluster_names == ("c__region", "c__n")
    assert d.cluster_column("c__n").tolist() == [2.0, 2.0]
    assert d.weight.tolist() == [1.0, 1.0]


def test_cluster_covariate_varying_names_cluster(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a,c__region\ns1,1,1,3\ns1,2,0,5\ns2,1,0,4\n")
    with pytest.raises(ConsistencyError, match="s1"):
        load_dataset(p)


def test_non_binary_treatment_cites_row(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a\ns1,1,1\ns1,2,0\ns2,1,2\n")
    with pytest.raises(DataError, match="row 3"):
        load_dataset(p)


def test_missing_column_named(tmp_path):
    p = _csv(tmp_path, "cluster_id,a\ns1,1\n")
    with pytest.raises(SchemaError, match="'y'"):
        load_dataset(p)


def test_non_numeric_covariate(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a,w__x\ns1,1,1,abc\n")
    with pytest.raises(ParseError):
        load_dataset(p)


def test_missing_value_rejected(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a,w__x\ns1,1,1,\n")
    with pytest.raises(ParseError, match="row 1"):
        load_dataset(p)


def test_schema_renames_columns(tmp_path):
    p = _csv(tmp_path, "school,score,treated\ns1,1,1\ns1,2,0\n")
    d = load_dataset(p, {"cluster_id": "school", "y": "score", "a": "treated"})
    assert d.cluster_ids == ("s1",) and d.y.tolist() == [1.0, 2.0]


def test_weight_must_be_constant_within_cluster(tmp_path):
    p = _csv(tmp_path, "cluster_id,y,a,weight\ns1,1,1,1\ns1,2,0,2\n")
    with pytest.raises(ConsistencyError, match="s1"):
        load_dataset(p)


def test_round_trip_exact(tmp_path, rng):
    d = random_dataset(rng, 12, 6, weights=True)
    write_csv(d, tmp_path / "rt.csv")
    back = load_dataset(tmp_path / "rt.csv")
    assert back == d


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 15))
def test_round_trip_property(tmp_path_factory, seed, N):
    d = random_dataset(np.random.default_rng(seed), N, 4, weights=True)
    path = tmp_path_factory.mktemp("rt") / "d.csv"
    write_csv(d, path)
    assert load_dataset(path) == d


@settings(max_examples=100)
@given(
    st.integers(1, 5),
    st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=5),
    st.floats(-1, 3),
    st.lists(st.integers(-1, 2), min_size=1, max_size=5),
)
def test_cluster_data_invariants_fuzz(n, ys, weight, a):
    try:
        c = ClusterData("x", ys, a, np.zeros((len(ys), 1)), [1.0], weight)
    except DataError:
        return
    assert c.n == len(c.y) == len(c.a) == c.w_unit.shape[0] >= 1
    assert set(np.unique(c.a)) <= {0, 1}
    assert c.weight >= 0


def test_cluster_data_is_read_only():
    c = ClusterData("x", [1.0], [1], [[0.0]], [1.0])
    with pytest.raises(ValueError):
        c.y[0] = 2.0


def test_validate_all_treated_flag():
    d = Dataset.from_arrays(["a", "a", "b"], [1, 2, 3], [1, 1, 1])
    assert "no control units" in validate_dataset(d).flags


def test_validate_size_tally():
    ids = ["a"] + ["b"] * 3 + ["c"] * 5
    d = Dataset.from_arrays(ids, np.zeros(9), [0, 1] * 4 + [0])
    r = validate_dataset(d)
    assert (r.min_size, r.max_size, r.singleton_count) == (1, 5, 1)


def test_validate_fraction_treated():
    d = Dataset.from_arrays(["a", "a", "b", "b"], np.zeros(4), [1, 0, 0, 1])
    r = validate_dataset(d)
    assert r.fraction_treated == 0.5
    assert json.loads(r.to_json())["fraction_treated"] == 0.5


def test_split_four_clusters(rng):
    d = random_dataset(rng, 4)
    for seed in range(10):
        f = split_clusters(d, 2, seed)
        a, b = set(f.members(0)), set(f.members(1))
        assert len(a) == len(b) == 2 and not a & b and a | b == set(d.cluster_ids)


def test_split_five_clusters(rng):
    d = random_dataset(rng, 5)
    f = split_clusters(d, 2, 3)
    assert sorted(len(f.members(k)) for k in range(2)) == [2, 3]


def test_split_deterministic(rng):
    d = random_dataset(rng, 9)
    assert split_clusters(d, 3, 7) == split_clusters(d, 3, 7)


def test_split_too_many_folds(rng):
    with pytest.raises(ValueError):
        split_clusters(random_dataset(rng, 3), 4)


def test_split_independent_of_cluster_order(rng):
    d = random_dataset(rng, 11)
    rev = d.subset(np.arange(d.n_clusters)[::-1])
    assert split_clusters(d, 3, 5) == split_clusters(rev, 3, 5)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 30), st.integers(2, 6), st.integers(0, 10**6))
def test_split_is_partition(seed, N, k, split_seed):
    if k > N:
        return
    d = random_dataset(np.random.default_rng(seed), N, 3)
    f = split_clusters(d, k, split_seed)
    members = [set(f.members(j)) for j in range(k)]
    assert sum(len(m) for m in members) == N
    assert set().union(*members) == set(d.cluster_ids)
    sizes = [len(m) for m in members]
    assert max(sizes) - min(sizes) <= 1


def test_fold_assignment_rejects_empty_fold():
    with pytest.raises(ValueError):
        FoldAssignment(2, {"a": 0, "b": 0})


def test_from_arrays_checks_size_column():
    with pytest.raises(ConsistencyError):
        Dataset.from_arrays(["a", "a"], [1, 2], [0, 1], c_cluster=[[3], [3]], cluster_names=["c__n"])
