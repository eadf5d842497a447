"""Experiment configuration: defaults, validation and file loading."""

import copy
import json
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


# desk-scale defaults; PAPER_SCALE overrides the expensive ones
DEFAULTS = {
    "activation": "gelu",
    "loss": {"kind": "huber", "M": 1.0},
    "link": "phase_retrieval",
    "eta": None,
    "m": 1,
    "t_max": 1000,
    "rho_stop": 0.9,
    "post_stop_steps": 100,
    "plateau_delta": 0.01,
    "plateau_window": 500,
    "test_n": 10_000,
    "log_every": 1,
    "d": 2000,
    "d_grid": [500, 1000],
    "delta": 15.0,
    "delta_grid": [3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0],
    "trials": 20,
    "success_threshold": 0.5,
    "seed": 0,
    "seeds": [0, 1, 2],
    "N_mc": 100_000,
    "t_grid": list(range(26)),
    "T_dmft": 10,
    "gap": 0.01,
    "tol": 0.01,
    "bracket": [1.0, 16.0],
    "t": 0,
    "init_scale": 1.0,
    "p": 5,
    "bins": 100,
    "workers": 1,
}

PAPER_SCALE = {
    "d": 5000,
    "d_grid": [1000, 2000, 3000, 4000],
    "trials": 60,
    "N_mc": 900_000,
}

# step sizes by activation for threshold curves and sweeps
ETA_PRESETS = {"gelu": 1.5, "quad": 0.25, "relu": 0.5}
GROKKING_ETA = 0.5


def _num(x):
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _int(x):
    return isinstance(x, int) and not isinstance(x, bool)


def _pos(x):
    return _num(x) and x > 0


def _posint(x):
    return _int(x) and x > 0


def _nonneg_int(x):
    return _int(x) and x >= 0


def _list_of(pred, nonempty=True):
    return lambda x: isinstance(x, list) and (len(x) > 0 or not nonempty) and all(map(pred, x))


SCHEMA = {
    "activation": (lambda x: x in ("gelu", "quad", "relu"), "one of gelu, quad, relu"),
    "loss.kind": (lambda x: x in ("huber", "square"), "one of huber, square"),
    "loss.M": (_pos, "positive number"),
    "link": (lambda x: x in ("phase_retrieval", "linear"), "phase_retrieval or linear"),
    "eta": (lambda x: x is None or _pos(x), "positive number"),
    "m": (_posint, "positive integer"),
    "t_max": (_nonneg_int, "non-negative integer"),
    "rho_stop": (lambda x: _num(x) and 0 < x <= 1, "number in (0, 1]"),
    "post_stop_steps": (_nonneg_int, "non-negative integer"),
    "plateau_delta": (_pos, "positive number"),
    "plateau_window": (_posint, "positive integer"),
    "test_n": (_nonneg_int, "non-negative integer"),
    "log_every": (_posint, "positive integer"),
    "d": (_posint, "positive integer"),
    "d_grid": (_list_of(_posint), "non-empty list of positive integers"),
    "delta": (_pos, "positive number"),
    "delta_grid": (_list_of(_pos), "non-empty list of positive numbers"),
    "trials": (_posint, "positive integer"),
    "success_threshold": (lambda x: _num(x) and 0 < x < 1, "number in (0, 1)"),
    "seed": (_nonneg_int, "non-negative integer"),
    "seeds": (_list_of(_nonneg_int), "non-empty list of non-negative integers"),
    "N_mc": (lambda x: _int(x) and x >= 1000, "integer >= 1000"),
    "t_grid": (_list_of(_nonneg_int), "non-empty list of non-negative integers"),
    "T_dmft": (_nonneg_int, "non-negative integer"),
    "gap": (_pos, "positive number"),
    "tol": (_pos, "positive number"),
    "bracket": (lambda x: _list_of(_pos)(x) and len(x) == 2 and x[0] < x[1], "[lo, hi] with lo < hi"),
    "t": (_nonneg_int, "non-negative integer"),
    "init_scale": (_pos, "positive number"),
    "p": (_posint, "positive integer"),
    "bins": (_posint, "positive integer"),
    "workers": (_posint, "positive integer"),
}

HELP = {
    "activation": "gelu | quad | relu (relu only for training commands)",
    "loss.kind": "huber | square",
    "loss.M": "Huber threshold",
    "link": "phase_retrieval | linear",
    "eta": "GD step size; default 1.5 gelu, 0.25 quad, 0.5 for grokking",
    "m": "number of neurons",
    "t_max": "maximum GD steps",
    "rho_stop": "stop once rho reaches this, after post_stop_steps more steps",
    "plateau_delta": "plateau stop when rho moves less than this ...",
    "plateau_window": "... over this many steps",
    "test_n": "test set size (0 disables test risk)",
    "d": "input dimension for single-point commands",
    "d_grid": "dimensions for sweep",
    "delta": "sample ratio n/d for single-point commands",
    "delta_grid": "sample ratios for sweep",
    "trials": "independent runs per grid point",
    "seed": "base seed",
    "seeds": "seeds for threshold bisection",
    "N_mc": "Monte Carlo paths per DMFT step",
    "t_grid": "GD times for threshold curves",
    "T_dmft": "DMFT horizon for dmft-run",
    "gap": "edge gap for outlier existence",
    "tol": "bisection tolerance on delta",
    "bracket": "initial delta bracket",
    "t": "GD step at which to take the Hessian",
    "init_scale": "norm of each initial neuron for hessian-spectrum (1 = unit sphere)",
    "p": "number of smallest eigenpairs",
    "bins": "ESD histogram bins",
    "workers": "worker processes",
}


def _flatten(cfg, prefix=""):
    out = {}
    for k, v in cfg.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _set(cfg, dotted, value):
    parts = dotted.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value


def validate(cfg):
    flat = _flatten(cfg)
    for key, value in flat.items():
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        pred, desc = SCHEMA[key]
        if not pred(value):
            raise ConfigError(f"{key} must be {desc}, got {value!r}")
    return cfg


def read_file(path):
    """YAML or JSON mapping; a run manifest yields its config snapshot."""
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    try:
        data = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    if "config" in data and "outputs" in data:
        data = data["config"]
    return data


def resolve(user=None, paper_scale=False, overrides=None, grokking=False):
    """Defaults, then paper-scale values, then the user file, then CLI overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if paper_scale:
        cfg.update(copy.deepcopy(PAPER_SCALE))
    for src in (user or {}, overrides or {}):
        for key, value in _flatten(src).items():
            _set(cfg, key, value)
    validate(cfg)
    if cfg["eta"] is None:
        cfg["eta"] = GROKKING_ETA if grokking else ETA_PRESETS[cfg["activation"]]
    return cfg


def describe_keys():
    width = max(map(len, HELP))
    return "\n".join(f"  {k.ljust(width)}  {v}" for k, v in HELP.items())
