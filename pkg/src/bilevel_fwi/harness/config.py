"""Experiment configuration: nested defaults, YAML files and ``--set`` overrides.

Keys are addressed with dots, e.g. ``--set upper.max_iter=10`` or
``--set frequencies.groups=[[0.5],[0.5,1.5]]``; values are parsed as YAML
scalars or flow collections.
"""
from __future__ import annotations

import copy
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "seed": 0,
    "threads": 1,
    "out": "out",
    # full model from which the slices are cut; a layered generator is used
    # when no file is given
    "model": {
        "file": None,
        "n1": 220,
        "n2": 61,
        "width_x": None,  # None: about 11 km, the Marmousi aspect
        "width_z": 3.0,
        "seed": 0,
        "smooth_cells": 3.0,
        "n_slices": 5,
    },
    "start": {"c_top": 1.5, "c_bottom": 4.0},
    "sources": {"x": 0.25, "z": [0.5, 1.5, 2.5]},
    "sensors": {
        "count": 3,
        "x_from_right": 0.25,
        "z_min": 0.1,
        "z_max": 2.9,
        "initial": None,  # list of [x, z]; random within the bounds when null
        "seed": 0,
        "freeze_x": True,
    },
    "frequencies": {"groups": [[0.5], [0.5, 1.5]], "optimise_alpha": None},
    "alpha0": 10.0,
    "mu": 1e-6,
    "amplitude": 1e4,
    "refine": 2,
    "noise_db": 40.0,
    "split": {"train": [1, 2, 3, 5], "test": [4]},
    "strategy": "pa",  # none | alpha | positions | pa
    "lower": {
        "gtol": 1e-10,
        "gtol_rel": 1e-6,
        "max_iter": 5000,
        "memory": 10,
        "approx_wolfe_rtol": 1e-12,
    },
    "upper": {
        "pgtol": 1e-10,
        "max_iter": 50,
        "stall_tol": 1e-12,
        "pcg_tol": 1e-15,
        "pcg_maxiter": None,
        "preconditioner": "P2",
        "residual": "data",
        "alpha_bounds": [1e-4, 1e4],
    },
    "forward": {"slice": 1, "freq_hz": 0.5, "source": 0},
    "fwi": {"slice": 1, "freqs_hz": [0.5, 1.5]},
    "xval": {"strategies": ["none", "pa"], "parallel": False},
    "bench": {
        "slice": 1,
        "alphas": [0.5, 1, 5, 10, 20, 50, 100],
        "pcg_tol": 1e-15,
        "mu": 1e-8,
        "freqs_hz": [0.5],
        "near": [[None, 1.0], [None, 1.5], [None, 2.0]],
        "far": [[None, 0.1], [None, 1.5], [None, 2.9]],
    },
    "gradcheck": {"n1": 8, "n2": 8, "upper_n": 10, "components": 20, "seed": 1},
    "toy": {
        "n": 13,
        "L": 1.25,
        "centres": [[0.5, 0.5]],  # bump centres as fractions of L
        "sigma": 0.15,
        "dc": 1.0,
        "source_x": 0.1,
        "sensor_x_from_right": 0.1,
        "refine": 1,
        "amplitude": 100.0,
        "alpha": 1e-4,
        "mu": 1e-6,
        "low_hz": 0.5,
        "high_hz": 5.5,
        "groups": [[0.5], [5.5]],
        "n_scan": 1251,
        "delta0": 0.6,
        "lower_gtol_rel": 1e-8,
        "lower_max_iter": 20000,
        "pgtol": 1e-8,
        "max_iter": 30,
        # dips shallower than this fraction of the scan's range are below
        # the resolution set by the lower-level tolerance
        "prominence_rtol": 1e-3,
    },
    "plots": True,
}


def parse_value(text: str):
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc


def merge(base: dict, update: dict, path: str = "") -> dict:
    """Recursive merge; unknown keys are rejected so typos fail loudly."""
    out = copy.deepcopy(base)
    for key, val in (update or {}).items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(val, dict):
            out[key] = merge(out[key], val, where + ".")
        else:
            out[key] = copy.deepcopy(val)
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = cfg
    for i, p in enumerate(parts[:-1]):
        if p not in node or not isinstance(node[p], dict):
            raise ConfigError(f"unknown config key {'.'.join(parts[: i + 1])!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        set_key(cfg, key.strip(), parse_value(text))
    return cfg


def load_config(path=None, overrides=None, **flags) -> dict:
    """Defaults, then the YAML file, then ``--set`` items, then explicit flags."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = merge(cfg, data)
    cfg = apply_overrides(cfg, overrides)
    for key, val in flags.items():
        if val is not None:
            cfg[key] = val
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    model = cfg["model"]
    if model["file"] is not None and not Path(model["file"]).exists():
        raise ConfigError(f"model file {model['file']!r} does not exist")
    n = int(model["n_slices"])
    train = [int(k) for k in cfg["split"]["train"]]
    test = [int(k) for k in cfg["split"]["test"]]
    for k in train + test:
        if not 1 <= k <= n:
            raise ConfigError(f"slice {k} outside 1..{n}")
    if set(train) & set(test):
        raise ConfigError("training and testing slices overlap")
    if not train:
        raise ConfigError("no training slices")
    if cfg["strategy"] not in STRATEGIES:
        raise ConfigError(f"strategy must be one of {sorted(STRATEGIES)}")
    if int(cfg["threads"]) < 1:
        raise ConfigError("threads must be positive")
    if cfg["upper"]["preconditioner"] not in ("P1", "P2", "none"):
        raise ConfigError("upper.preconditioner must be P1, P2 or none")


# (optimise positions, optimise alpha)
STRATEGIES = {
    "none": (False, False),
    "alpha": (False, True),
    "positions": (True, False),
    "pa": (True, True),
}


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
