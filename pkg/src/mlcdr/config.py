"""Run configuration: JSON file validated against a schema, with command-line overrides."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import jsonschema

COMMANDS = ("estimate", "simulate", "icc", "sweep", "diagnose")

# flat spec: {"kind": ..., <hyperparameter>: value, ...}; names are checked by LearnerSpec
_LEARNER = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["linear-ridge", "logistic-ridge", "boosted-stumps", "knn", "oracle"]},
    },
    "required": ["kind"],
}

_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}

SCHEMA: dict[str, Any] = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "data": {"type": "string"},
        "columns": {
            "type": "object",
            "properties": {k: {"type": "string"} for k in ("cluster_id", "y", "a", "weight")},
            "additionalProperties": False,
        },
        "weight": {"type": ["string", "null"]},
        "method": {"enum": ["proposed", "aipw"]},
        "methods": {"type": "array", "items": {"enum": ["proposed", "aipw"]}, "minItems": 1},
        "folds": {"type": "integer", "minimum": 2},
        "splits": {"type": "integer", "minimum": 1},
        "clip": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 0.5},
        "level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "threads": {"type": "integer", "minimum": 1},
        "out": {"type": "string"},
        "learners": {
            "type": "object",
            "properties": {"g": _LEARNER, "pi": _LEARNER, "e": _LEARNER},
            "additionalProperties": False,
        },
        "oracle": {"type": "boolean"},
        "strata": {
            "type": "object",
            "properties": {
                "by": {"enum": ["cluster_size", "column"]},
                "J": {"type": "integer", "minimum": 1},
                "cuts": {"type": "array", "items": {"type": "number"}},
                "name": {"type": "string"},
                "levels": _NUM_LIST,
                "b0": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "undersample": {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "min"}, {"type": "null"}]},
        "undersample_repeats": {"type": "integer", "minimum": 1},
        "subgroups": {"type": "array", "items": {"type": "string"}},
        "dgp": {"enum": ["table1", "table3"]},
        "n_clusters": {"type": "integer", "minimum": 4},
        "sigma_v": {"type": "number", "minimum": 0},
        "sigma_u": {"type": "number", "minimum": 0},
        "size_range": {"type": "array", "items": {"type": "integer", "minimum": 1},
                       "minItems": 2, "maxItems": 2},
        "reps": {"type": "integer", "minimum": 2},
        "grid": {
            "type": "object",
            "properties": {"sigma_v": _NUM_LIST, "sigma_u": _NUM_LIST},
            "required": ["sigma_v", "sigma_u"],
            "additionalProperties": False,
        },
        "svg": {"type": "boolean"},
        "draws": {"type": "integer", "minimum": 1},
    },
}

DEFAULTS: dict[str, Any] = {
    "method": "proposed",
    "folds": 2,
    "splits": 1,
    "clip": 0.01,
    "level": 0.95,
    "seed": 0,
    "undersample": None,
    "undersample_repeats": 1,
    "subgroups": [],
    "dgp": "table1",
    "n_clusters": 500,
    "sigma_v": 0.0,
    "sigma_u": 0.5,
    "reps": 200,
    "oracle": False,
    "svg": False,
    "draws": 1000,
}


class ConfigError(ValueError):
    pass


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return cfg


def resolve(file_cfg: Mapping[str, Any], overrides: Mapping[str, Any]) -> dict:
    """Defaults, then the config file, then non-None flag values; validated at each layer."""
    validate(file_cfg)
    merged = {**DEFAULTS, **file_cfg}
    merged.update({k: v for k, v in overrides.items() if v is not None})
    validate(merged)
    return merged


def validate(cfg: Mapping[str, Any]) -> None:
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from None
