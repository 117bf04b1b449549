"""``mlcdr`` command line: estimate, simulate, icc, sweep, diagnose.

Exit codes: 0 success, 1 computation failure, 2 invalid config or input.
Errors are written to stderr as a JSON object.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config, resolve
from .covariance import StrataSpec, default_strata
from .data import DataError, Dataset, load_dataset, split_clusters, validate_dataset
from .diagnostics import HYPOTHESES, balance_tstats, overlap_diagnostic
from .dgp import SimConfig, simulate_dgp
from .estimators import MultilevelDR, default_learners, subgroup_effect
from .learners import LearnerSpec
from .nuisance import fit_nuisances
from .rng import derive_generator, derive_seed
from .simlab import (
    EstimatorConfig,
    default_strata_count,
    efficiency_sweep,
    icc_binary_anova,
    icc_continuous,
    run_monte_carlo,
    simulated_icc,
    split_by_cluster,
    sweep_csv,
    sweep_svg,
    treatment_residuals,
)

log = logging.getLogger("mlcdr")


class InputError(Exception):
    """Bad config or unreadable input: exit code 2."""


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(cfg: dict, files: dict[str, str], primary: str) -> None:
    out = cfg.get("out")
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            Path(out, name).write_text(text, encoding="utf-8")
    sys.stdout.write(files[primary])


def _threads(cfg: dict) -> int:
    env = os.environ.get("MLCDR_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InputError(f"MLCDR_THREADS must be an integer, got {env!r}") from None
    return int(cfg.get("threads") or os.cpu_count() or 1)


def _learners(cfg: dict) -> dict[str, LearnerSpec]:
    specs = default_learners()
    for key, spec in (cfg.get("learners") or {}).items():
        try:
            specs[key] = LearnerSpec.from_dict(spec)
        except ValueError as exc:
            raise InputError(f"learners/{key}: {exc}") from None
    return specs


def _load(cfg: dict) -> Dataset:
    path = cfg.get("data")
    if not path:
        raise InputError("no data file given (use --data or the 'data' config key)")
    if not Path(path).is_file():
        raise InputError(f"data file not found: {path}")
    try:
        d = load_dataset(path, cfg.get("columns"))
        if cfg.get("weight"):
            d = d.with_weight(cfg["weight"])
    except (DataError, KeyError) as exc:
        raise InputError(str(exc)) from None
    return d


def _sim_config(cfg: dict) -> SimConfig:
    try:
        return SimConfig.for_dgp(
            cfg["dgp"], n_clusters=cfg["n_clusters"], sigma_v=float(cfg["sigma_v"]),
            sigma_u=float(cfg["sigma_u"]), size_range=cfg.get("size_range"), seed=cfg["seed"],
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _strata(cfg: dict, d: Dataset) -> StrataSpec:
    if "strata" in cfg:
        try:
            return StrataSpec.from_config(cfg["strata"], d)
        except (KeyError, ValueError) as exc:
            raise InputError(f"invalid strata: {exc}") from None
    return default_strata(d, 1)


def _undersample(cfg: dict, d: Dataset):
    m = cfg.get("undersample")
    return int(d.sizes.min()) if m == "min" else m


# -- commands -------------------------------------------------------------


def cmd_estimate(cfg: dict) -> int:
    d = _load(cfg)
    specs = _learners(cfg)
    strata = _strata(cfg, d)

    def model(data: Dataset) -> MultilevelDR:
        return MultilevelDR(
            method=cfg["method"], n_folds=cfg["folds"], n_splits=cfg["splits"],
            g_learner=specs["g"], pi_learner=specs["pi"], e_learner=specs["e"], strata=strata,
            clip=cfg["clip"], undersample=_undersample(cfg, data),
            undersample_repeats=cfg["undersample_repeats"], level=cfg["level"],
            random_state=cfg["seed"],
        ).fit(data)

    est = model(d)
    report = est.report(diagnostics={"validation": validate_dataset(d).to_dict()})
    files = {"report.json": _dump(report)}
    if cfg["subgroups"]:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subgroup", "proportion", "tau", "se", "ci_lower", "ci_upper"])
        for col in cfg["subgroups"]:
            try:
                sub = model(d.with_weight(col))
                eff = subgroup_effect(d, col, sub.aggregate_, cfg["level"])
            except (KeyError, DataError) as exc:
                raise InputError(f"subgroup {col}: {exc}") from None
            w.writerow([col, repr(eff.proportion), repr(eff.tau), repr(eff.se),
                        repr(eff.ci[0]), repr(eff.ci[1])])
        files["subgroups.csv"] = buf.getvalue()
    _emit(cfg, files, "report.json")
    return 0


def cmd_simulate(cfg: dict) -> int:
    sim = _sim_config(cfg)
    methods = cfg.get("methods") or [cfg["method"]]
    learners = None if cfg["oracle"] else _learners(cfg)
    J = cfg.get("strata", {}).get("J", default_strata_count(sim.n_clusters))
    estimators = {
        m: EstimatorConfig(m, learners, J, cfg["folds"], cfg["splits"], cfg["clip"],
                           cfg["undersample"], cfg["undersample_repeats"], cfg["level"])
        for m in methods
    }
    table = run_monte_carlo(sim, estimators, cfg["reps"], seed=cfg["seed"], level=cfg["level"],
                            n_jobs=_threads(cfg))
    _emit(cfg, {"metrics.csv": table.to_csv(), "metrics.json": table.to_json() + "\n"},
          "metrics.csv")
    return 0


def cmd_icc(cfg: dict) -> int:
    if cfg.get("data"):
        d = _load(cfg)
        specs = _learners(cfg)
        fit = fit_nuisances(d, split_clusters(d.sorted_by_id(), cfg["folds"], cfg["seed"]),
                            specs["g"], None, specs["e"], cfg["clip"])
        ry = d.y - fit.g(d.a)
        out = {
            "source": "data",
            "icc_a": icc_binary_anova(split_by_cluster(d, treatment_residuals(d, fit.e1))),
            "icc_y": icc_binary_anova(split_by_cluster(d, ry)),
        }
    else:
        sim = _sim_config(cfg)
        d = simulate_dgp(sim, derive_generator(cfg["seed"]))
        icc_a, icc_y = simulated_icc(d, sim)
        if sim.random_effect_family == "normal":
            icc_y = icc_continuous(sim.sigma_u)
        out = {"source": "simulation", "sim": sim.to_dict(), "icc_a": icc_a, "icc_y": icc_y}
    _emit(cfg, {"icc.json": _dump(out)}, "icc.json")
    return 0


def cmd_sweep(cfg: dict) -> int:
    grid = cfg.get("grid") or {"sigma_v": [0.0, 0.5, 1.0, 1.5, 2.0],
                               "sigma_u": [0.0, 0.5, 1.0, 1.5, 2.0]}
    points = [(sv, su) for sv in grid["sigma_v"] for su in grid["sigma_u"]]
    rows = efficiency_sweep(points, cfg["reps"], cfg["n_clusters"], cfg["seed"], cfg["dgp"],
                            n_jobs=_threads(cfg))
    files = {"sweep.csv": sweep_csv(rows)}
    if cfg["svg"]:
        files["sweep.svg"] = sweep_svg(rows)
    _emit(cfg, files, "sweep.csv")
    return 0


def cmd_diagnose(cfg: dict) -> int:
    d = _load(cfg)
    specs = _learners(cfg)
    canon = d.sorted_by_id()
    folds = split_clusters(canon, cfg["folds"], cfg["seed"])
    fit = fit_nuisances(canon, folds, specs["g"], specs["pi"], specs["e"], cfg["clip"],
                        _undersample(cfg, canon), cfg["seed"], cfg["undersample_repeats"])
    balance = balance_tstats(canon, fit, cfg["draws"], derive_seed(cfg["seed"], 1))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["covariate", *HYPOTHESES])
    for name in balance["covariates"]:
        w.writerow([name, *(f"{balance[h][name]:.4f}" for h in HYPOTHESES)])
    report = {"balance": balance, "overlap": overlap_diagnostic(fit, canon.a),
              "validation": validate_dataset(canon).to_dict()}
    _emit(cfg, {"diagnostics.json": _dump(report), "balance.csv": buf.getvalue()},
          "balance.csv")
    return 0


HANDLERS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "icc": cmd_icc,
            "sweep": cmd_sweep, "diagnose": cmd_diagnose}


# -- argument parsing -----------------------------------------------------


def _grid_arg(text: str) -> list[float]:
    from .simlab import parse_grid

    try:
        return parse_grid(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mlcdr", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="directory for output files")
    common.add_argument("--threads", type=int)
    common.add_argument("--folds", type=int)
    common.add_argument("--clip", type=float)
    common.add_argument("--level", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="CSV file: cluster_id, y, a, w__*, c__*, [weight]")

    sim = argparse.ArgumentParser(add_help=False)
    sim.add_argument("--dgp", choices=["table1", "table3"])
    sim.add_argument("--n-clusters", type=int, dest="n_clusters")
    sim.add_argument("--sigma-v", type=float, dest="sigma_v")
    sim.add_argument("--sigma-u", type=float, dest="sigma_u")
    sim.add_argument("--reps", type=int)

    e = sub.add_parser("estimate", parents=[common, data], help="estimate the ATE from a CSV")
    e.add_argument("--method", choices=["proposed", "aipw"])
    e.add_argument("--splits", type=int)

    s = sub.add_parser("simulate", parents=[common, sim], help="Monte Carlo bias / SE / coverage")
    s.add_argument("--method", choices=["proposed", "aipw"])
    s.add_argument("--methods", nargs="+", choices=["proposed", "aipw"])
    s.add_argument("--splits", type=int)
    s.add_argument("--oracle", action="store_true", default=None,
                   help="use the true nuisance functions")

    sub.add_parser("icc", parents=[common, data, sim], help="intra-cluster correlations")

    w = sub.add_parser("sweep", parents=[common, sim], help="relative efficiency over a (sigma_v, sigma_u) grid")
    w.add_argument("--grid", type=_grid_arg, help='"start:stop:step" or comma list, used for both axes')
    w.add_argument("--svg", action="store_true", default=None, help="also write sweep.svg")

    g = sub.add_parser("diagnose", parents=[common, data], help="overlap and covariate balance")
    g.add_argument("--draws", type=int)
    return p


def _error(code: int, kind: str, message: str) -> int:
    sys.stderr.write(json.dumps({"error": {"type": kind, "message": message}}) + "\n")
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: v for k, v in vars(args).items() if k not in ("config", "verbose")}
    if overrides.get("grid") is not None:
        overrides["grid"] = {"sigma_v": overrides["grid"], "sigma_u": overrides["grid"]}
    try:
        file_cfg = load_config(args.config)
        if file_cfg.get("command", args.command) != args.command:
            raise ConfigError(f"config is for command {file_cfg['command']!r}, not {args.command!r}")
        cfg = resolve(file_cfg, overrides)
        return HANDLERS[args.command](cfg)
    except (ConfigError, InputError) as exc:
        return _error(2, type(exc).__name__, str(exc))
    except Exception as exc:  # noqa: BLE001 - surfaced as a JSON error object
        log.debug("failure", exc_info=True)
        return _error(1, type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
