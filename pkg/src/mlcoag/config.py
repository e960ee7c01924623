"""Experiment config: JSON schema, dotted-path overrides and object construction."""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

import jsonschema

from .kernels import KERNEL_VARIANTS, PLACEMENT_VARIANTS, KernelSpec, PlacementSpec
from .measures import SiteSpace
from .simulator import ENGINES, SimConfig

COMMANDS = ("simulate", "decompose", "observables", "qmass", "mtable", "el-solve",
            "gel-bounds", "gibbs-check", "ng-scan", "smol", "smol-vs-sim")

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nonneg = {"type": "number", "minimum": 0}

KERNEL_SCHEMA = {
    "type": "object",
    "required": ["variant"],
    "properties": {
        "variant": {"enum": list(KERNEL_VARIANTS)},
        "c": _nonneg,
        "phi": {"type": "array", "items": {"type": "array", "items": _nonneg}},
        "table": {"type": "array"},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"variant": {"const": "spatial_product"}}},
         "then": {"required": ["phi"]}},
        {"if": {"properties": {"variant": {"const": "table"}}},
         "then": {"required": ["table"]}},
    ],
}

PLACEMENT_SCHEMA = {
    "type": "object",
    "required": ["variant"],
    "properties": {"variant": {"enum": list(PLACEMENT_VARIANTS)}, "table": {"type": "array"}},
    "additionalProperties": False,
    "if": {"properties": {"variant": {"const": "fixed_table"}}},
    "then": {"required": ["table"]},
}

PROPERTIES = {
    "command": {"enum": list(COMMANDS)},
    "space": {"type": "object", "required": ["weights"],
              "properties": {"weights": {"type": "array", "minItems": 1, "items": _nonneg}},
              "additionalProperties": False},
    "kernel": KERNEL_SCHEMA,
    "placement": PLACEMENT_SCHEMA,
    "engine": {"enum": list(ENGINES)},
    "N": {"type": "number", "minimum": 1},
    "T": _pos,
    "seed": {"type": "integer", "minimum": 0},
    "replicas": _posint,
    "workers": _posint,
    "L": _posint,
    "L_list": {"type": "array", "minItems": 1, "items": _posint},
    "T_list": {"type": "array", "minItems": 1, "items": _pos},
    "N_list": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 1}},
    "times": {"type": "array", "items": _nonneg},
    "t_checkpoints": {"type": "array", "minItems": 1, "items": _nonneg},
    "n_max": {"type": "integer", "minimum": 1, "maximum": 100000},
    "k": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
    "b": _pos,
    "dt": _pos,
    "damping": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "tol": _pos,
    "max_iter": _posint,
    "f": {"type": "string", "pattern": "^(one|exp_weight|max_size:[0-9]+)$"},
    "H": _pos,
    "h": _nonneg,
    "method": {"enum": ["tilted", "direct"]},
    "mc": {"type": "object", "properties": {"N_list": {"type": "array", "items": {"type": "number", "minimum": 1}},
                                             "replicas": _posint},
           "additionalProperties": False},
    "half": {"type": "boolean"},
    "out": {"type": "string"},
}

# fields each command cannot run without
REQUIRED = {
    "simulate": ["kernel", "N", "T"],
    "decompose": ["kernel", "N", "T"],
    "observables": ["kernel", "N", "T", "L_list"],
    "qmass": ["kernel", "T", "n_max"],
    "mtable": ["kernel", "T", "n_max"],
    "el-solve": ["kernel", "T", "L"],
    "gel-bounds": [],
    "gibbs-check": ["kernel", "N", "T"],
    "ng-scan": ["kernel", "T_list", "N_list", "L_list", "replicas"],
    "smol": ["kernel", "T", "L", "dt"],
    "smol-vs-sim": ["kernel", "N", "T", "L", "dt", "t_checkpoints"],
}


class ConfigError(ValueError):
    pass


def schema_for(command: str) -> dict:
    s = {"$schema": "http://json-schema.org/draft-07/schema#", "type": "object",
         "properties": PROPERTIES, "required": REQUIRED[command], "additionalProperties": False}
    if command == "gel-bounds":
        s["anyOf"] = [{"required": ["kernel"]}, {"required": ["H", "h"]}]
    return s


def _path(err: jsonschema.ValidationError) -> str:
    p = "$"
    for part in err.absolute_path:
        p += f"[{part}]" if isinstance(part, int) else f".{part}"
    return p


def validate(cfg: dict, command: str) -> None:
    validator = jsonschema.Draft7Validator(schema_for(command))
    errors = sorted(validator.iter_errors(cfg), key=lambda e: (list(e.absolute_path), e.message))
    if errors:
        lines = [f"{_path(e)}: {e.message}" for e in errors]
        raise ConfigError("invalid config\n  " + "\n  ".join(lines))
    try:
        build_objects(cfg)
    except ValueError as exc:
        raise ConfigError(f"invalid config\n  $: {exc}") from exc


def apply_override(cfg: dict, assignment: str) -> dict:
    """Set ``a.b.c=value``; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form path=value")
    path, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(cfg)
    node = out
    keys = path.split(".")
    for key in keys[:-1]:
        nxt = node.get(key)
        if not isinstance(nxt, dict):
            nxt = node[key] = {}
        node = nxt
    node[keys[-1]] = value
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def build_objects(cfg: dict) -> dict:
    """KernelSpec, PlacementSpec and SiteSpace from the config (those present)."""
    out = {}
    if "kernel" in cfg:
        out["kernel"] = KernelSpec.from_json(cfg["kernel"])
    out["placement"] = PlacementSpec.from_json(cfg.get("placement", {"variant": "weighted_random"}))
    out["space"] = SiteSpace(tuple(cfg.get("space", {"weights": [1.0]})["weights"]))
    return out


def sim_config(cfg: dict, T: float | None = None, N: float | None = None) -> SimConfig:
    o = build_objects(cfg)
    return SimConfig(float(N if N is not None else cfg["N"]), float(T if T is not None else cfg["T"]),
                     o["kernel"], o["placement"], o["space"], int(cfg.get("seed", 0)),
                     cfg.get("engine", "auto"))
