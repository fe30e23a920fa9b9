"""Experiment configuration: JSON documents with dotted-path overrides."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

EXPERIMENTS = ("verify", "gen", "ot", "harmonic", "restriction", "multiscale")

_BASE = {
    "seeds": [1],
    "out": "otlinlab-out",
    "geometry": {"Rbar": 16.0},
    "generator": {
        "kind": "perturbed_lattice",
        "spacing": 1.0,
        "amplitude": 0.05,
        "intensity": 1.0,
        "shift": 0.3,
        "drift": [0.15, -0.1],
        "strain": [[0.6, 0.25], [0.25, -0.6]],
    },
    "solver": {
        "cells_per_unit": 1.0,
        "n_r": 256,
        "n_theta": 256,
        "candidates": 8,
        "tau": 0.05,
        "theta": 0.5,
        "R_min": 4.0,
        "smallness_cap": 0.1,
        "k_neighbors": 12,
        "T": 2,
        "samples": 16,
    },
    "beta": {"kind": "log", "alpha": 0.0, "offset": math.e},
    "inputs": {"mu": None, "nu": None},
    "faults": [],
}

_PER_KIND = {
    "harmonic": {},
    "restriction": {"geometry": {"Rbar": 4.0}, "generator": {"kind": "translated_quadrature"}, "seeds": list(range(1, 11))},
    "multiscale": {"geometry": {"Rbar": 64.0}, "generator": {"kind": "poisson"}},
    "gen": {"generator": {"kind": "poisson"}},
    "ot": {},
    "verify": {},
}


class ConfigError(ValueError):
    pass


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def defaults(kind: str) -> dict:
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {kind!r}")
    cfg = _merge(_BASE, _PER_KIND[kind])
    cfg["experiment"] = kind
    return cfg


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def get_path(cfg: dict, dotted: str, default=None):
    node = cfg
    for k in dotted.split("."):
        if not isinstance(node, dict) or k not in node:
            return default
        node = node[k]
    return node


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        set_path(cfg, key.strip(), _parse_value(val.strip()))
    return cfg


def load_config(kind: str, path=None, overrides=None) -> dict:
    """Defaults for ``kind``, then the JSON file (or a report's embedded config), then overrides."""
    cfg = defaults(kind)
    if path is not None:
        with open(path) as fh:
            doc = json.load(fh)
        if "config" in doc and isinstance(doc["config"], dict):
            # replaying a report: its embedded config, restricted to the report's seed
            seed = doc.get("seed")
            doc = copy.deepcopy(doc["config"])
            if isinstance(seed, int):
                doc["seeds"] = [seed]
        doc = {k: v for k, v in doc.items() if k != "experiment"}
        cfg = _merge(cfg, doc)
    cfg = apply_overrides(cfg, overrides)
    cfg["experiment"] = kind
    validate(cfg)
    return cfg


def validate(cfg: dict):
    s = cfg["solver"]
    seeds = cfg.get("seeds")
    if not isinstance(seeds, list) or not seeds or not all(isinstance(v, int) for v in seeds):
        raise ConfigError("seeds must be a non-empty list of integers")
    n_t = int(s["n_theta"])
    checks = [
        (int(s["n_r"]) >= 32, "solver.n_r must be at least 32"),
        (n_t >= 32 and n_t & (n_t - 1) == 0, "solver.n_theta must be a power of two, at least 32"),
        (int(s["candidates"]) >= 8, "solver.candidates must be at least 8"),
        (0 < float(s["tau"]) < 1.0 / 3.0, "solver.tau must be in (0, 1/3)"),
        (0 < float(s["theta"]) < 1, "solver.theta must be in (0, 1)"),
        (float(s["R_min"]) > 0, "solver.R_min must be positive"),
        (float(s["smallness_cap"]) > 0, "solver.smallness_cap must be positive"),
        (float(s["cells_per_unit"]) > 0, "solver.cells_per_unit must be positive"),
        (int(s["T"]) >= 2, "solver.T must be at least 2"),
        (int(s["samples"]) >= 16, "solver.samples must be at least 16"),
        (float(cfg["geometry"]["Rbar"]) > 0, "geometry.Rbar must be positive"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


@dataclass
class ExperimentConfig:
    """Typed view of a resolved configuration document."""

    kind: str
    geometry: dict
    generator: dict
    solver: dict
    seeds: list
    out: str
    beta: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, cfg: dict) -> "ExperimentConfig":
        validate(cfg)
        return cls(cfg["experiment"], cfg["geometry"], cfg["generator"], cfg["solver"], list(cfg["seeds"]),
                   cfg["out"], cfg.get("beta", {}), copy.deepcopy(cfg))

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)
