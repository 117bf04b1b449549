import json
import subprocess
import sys

import numpy as np
import pytest

from mlcdr.cli import main
from mlcdr.data import Dataset, load_dataset, write_csv
from mlcdr.dgp import SimConfig, simulate_dgp
from mlcdr.estimators import estimate
from mlcdr.learners import LearnerSpec
from mlcdr.rng import derive_generator, derive_seed

FAST = {"kind": "boosted-stumps", "rounds": 10}


@pytest.fixture
def data_file(tmp_path):
    d = simulate_dgp(SimConfig(n_clusters=40, size_range=(3, 6), sigma_u=1.0), derive_generator(2))
    half = (np.arange(d.n_clusters) % 2).astype(float)
    d = Dataset(d.cluster_ids, d.sizes, d.y, d.a, d.w_unit,
                np.column_stack([d.c_cluster[:, :2], half, d.c_cluster[:, 2]]), d.weight,
                d.unit_names, ("c__c1", "c__c2", "c__half", "c__n"))
    path = tmp_path / "d.csv"
    write_csv(d, path)
    return path


@pytest.fixture
def fast_config(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"learners": {"g": FAST, "pi": FAST, "e": FAST}}))
    return path


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "mlcdr.cli", "--help"], capture_output=True)
    assert r.returncode == 0 and b"estimate" in r.stdout
    for cmd in ("estimate", "simulate", "icc", "sweep", "diagnose"):
        r = subprocess.run([sys.executable, "-m", "mlcdr.cli", cmd, "--help"], capture_output=True)
        assert r.returncode == 0


def test_estimate_single_split_matches_library(capsys, data_file, fast_config):
    code, out, _ = _run(capsys, ["estimate", "--data", data_file, "--config", fast_config,
                                 "--seed", 3])
    assert code == 0
    rep = json.loads(out)
    spec = LearnerSpec.from_dict(FAST)
    ref = estimate(load_dataset(data_file), "proposed", 2, spec, spec, spec, 1,
                   seed=derive_seed(3, 0))
    assert rep["tau"] == ref.tau
    assert rep["n_clusters"] == 40 and rep["splits"] == 1


def test_estimate_deterministic_bytes_with_subgroups(capsys, tmp_path, data_file):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learners": {"g": FAST, "pi": FAST, "e": FAST},
                               "subgroups": ["c__half"], "splits": 5}))
    outs = []
    for k in range(2):
        out_dir = tmp_path / f"o{k}"
        assert _run(capsys, ["estimate", "--data", data_file, "--config", cfg, "--out", out_dir])[0] == 0
        outs.append({p.name: p.read_bytes() for p in out_dir.iterdir()})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"report.json", "subgroups.csv"}
    lines = outs[0]["subgroups.csv"].decode().splitlines()
    assert lines[0].startswith("subgroup,proportion,tau") and lines[1].startswith("c__half,0.5,")


def test_flags_override_config(capsys, tmp_path, data_file):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"learners": {"g": FAST, "pi": FAST, "e": FAST}, "method": "proposed"}))
    code, out, _ = _run(capsys, ["estimate", "--data", data_file, "--config", cfg,
                                 "--method", "aipw"])
    assert code == 0 and json.loads(out)["method"] == "aipw"


def test_missing_data_file(capsys, tmp_path):
    code, out, err = _run(capsys, ["estimate", "--data", tmp_path / "absent.csv"])
    assert code == 2 and json.loads(err)["error"]["message"].startswith("data file not found")


@pytest.mark.parametrize("cfg", [
    {"unknown_key": 1},
    {"folds": 1},
    {"learners": {"g": {"kind": "forest"}}},
    {"learners": {"g": {"kind": "knn", "k": 0}}},
    {"strata": {"J": 0}},
])
def test_invalid_config_exit_two(capsys, tmp_path, data_file, cfg):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    code, _, err = _run(capsys, ["estimate", "--data", data_file, "--config", path])
    assert code == 2 and "error" in json.loads(err)


def test_malformed_json_exit_two(capsys, tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    assert _run(capsys, ["icc", "--config", path])[0] == 2


def test_bad_csv_exit_two(capsys, tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("cluster_id,y,a\ns1,1,2\n")
    code, _, err = _run(capsys, ["estimate", "--data", path])
    assert code == 2 and "row 1" in err


def test_computation_failure_exit_one(capsys, tmp_path, fast_config):
    path = tmp_path / "tiny.csv"
    path.write_text("cluster_id,y,a\ns1,1,1\ns2,0,0\ns3,1,0\n")
    code, _, err = _run(capsys, ["estimate", "--data", path, "--config", fast_config])
    assert code == 1 and "at least 2 clusters" in err


def test_simulate_oracle(capsys, tmp_path):
    argv = ["simulate", "--oracle", "--reps", 4, "--n-clusters", 40, "--sigma-u", 1.5,
            "--methods", "proposed", "aipw", "--out", tmp_path / "s"]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "scenario,bias_x100,se_x100,coverage" and len(lines) == 3
    assert (tmp_path / "s" / "metrics.json").exists()
    assert _run(capsys, argv)[1] == out


def test_threads_env_override(capsys, monkeypatch):
    argv = ["simulate", "--oracle", "--reps", 4, "--n-clusters", 30, "--threads", 1]
    base = _run(capsys, argv)[1]
    monkeypatch.setenv("MLCDR_THREADS", "2")
    assert _run(capsys, argv)[1] == base
    monkeypatch.setenv("MLCDR_THREADS", "many")
    assert _run(capsys, argv)[0] == 2


def test_icc_simulation(capsys):
    code, out, _ = _run(capsys, ["icc", "--sigma-u", 1.5, "--n-clusters", 100])
    assert code == 0 and round(json.loads(out)["icc_y"], 2) == 0.69
    code, out, _ = _run(capsys, ["icc", "--sigma-u", 0, "--n-clusters", 100])
    assert json.loads(out)["icc_y"] == 0.0


def test_icc_data(capsys, data_file, fast_config):
    code, out, _ = _run(capsys, ["icc", "--data", data_file, "--config", fast_config])
    rep = json.loads(out)
    assert code == 0 and rep["source"] == "data" and -1 < rep["icc_a"] < 1


def test_icc_singletons_error(capsys, tmp_path, fast_config):
    path = tmp_path / "single.csv"
    rows = "\n".join(f"s{i},{i % 3},{i % 2},{i * 0.1}" for i in range(12))
    path.write_text("cluster_id,y,a,w__x\n" + rows + "\n")
    code, _, err = _run(capsys, ["icc", "--data", path, "--config", fast_config])
    assert code == 1 and "undefined" in err


def test_sweep(capsys, tmp_path):
    argv = ["sweep", "--grid", "0,1.5", "--reps", 3, "--n-clusters", 30, "--svg",
            "--out", tmp_path / "w"]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "sigma_v,sigma_u,icc_a,icc_y,rho" and len(lines) == 5
    assert (tmp_path / "w" / "sweep.svg").read_text().startswith("<svg")
    assert _run(capsys, argv)[1] == out


def test_diagnose(capsys, tmp_path, data_file, fast_config):
    argv = ["diagnose", "--data", data_file, "--config", fast_config, "--draws", 20,
            "--out", tmp_path / "g"]
    code, out, _ = _run(capsys, argv)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "covariate,H0_no,H0_e,H0_pi"
    assert all(len(line.split(",")) == 4 for line in lines)
    report = json.loads((tmp_path / "g" / "diagnostics.json").read_text())
    assert sum(report["overlap"]["pi1"]["all"]["histogram"]) == load_dataset(data_file).n_units
    assert _run(capsys, argv)[1] == out


def test_config_command_mismatch(capsys, tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"command": "sweep"}))
    assert _run(capsys, ["icc", "--config", path])[0] == 2
