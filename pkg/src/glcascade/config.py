"""Experiment config files: INI-style sections of ``key = value`` pairs.

::

    [graph]
    name = ws-desk
    kind = ws            ; ba | ws | hk | kronecker
    nodes = 100
    k = 8                ; or: edges = 800 (directed edge target)
    weight_low = 0.2
    weight_high = 0.7

    [model]
    kind = ic            ; ic | voter | cice | logistic

    [experiment]
    n_list = 250, 1000, 5000
    p_init = 0.05
    estimators = sparse-mle, mle, greedy, lasso
    lambda_rule = theorem
    seeds = 3
    master_seed = 1
    plots = f1_vs_n, l2_vs_n

    [solver]
    tolerance = 1e-6

Every key is optional except ``[graph] kind/nodes`` and ``[experiment] n_list``.
Unknown sections or keys are errors so typos do not silently fall back to defaults.
"""

from __future__ import annotations

import configparser
from dataclasses import asdict, fields
from pathlib import Path

from .cascades import CascadeModel
from .evaluation import ExperimentConfig, GraphSpec
from .graph import ParameterError
from .recovery import SolverConfig


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(v) for v in raw.replace(",", " ").split())


def _names(raw: str) -> tuple[str, ...]:
    return tuple(v.strip().replace("-", "_") for v in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _opt_int(raw: str):
    return None if raw.strip().lower() in ("", "none") else int(raw)


def _opt_float(raw: str):
    return None if raw.strip().lower() in ("", "none") else float(raw)


def _initiator(raw: str):
    v = _floats(raw)
    if len(v) != 4:
        raise ValueError("initiator needs 4 numbers (row-major 2x2)")
    return ((v[0], v[1]), (v[2], v[3]))


SCHEMA = {
    "graph": {
        "name": str, "kind": str, "nodes": int, "k": _opt_int, "edges": _opt_int, "beta": float,
        "p_triad": float, "initiator": _initiator, "weight_low": float, "weight_high": float,
        "weak_prob": float, "weak_low": float, "weak_high": float,
    },
    "model": {"kind": str, "epsilon": float, "threshold": float, "horizon": _opt_int},
    "experiment": {
        "n_list": _ints, "p_init": _floats, "estimators": _names, "eta": float, "lambda_rule": str,
        "lambda": float, "alpha": _opt_float, "delta": float, "lambda_scale": float,
        "lambda_grid": _floats, "seeds": int, "master_seed": int, "timing": _bool,
        "max_parents": _opt_int, "plots": _names,
    },
    "solver": {
        "max_iterations": int, "tolerance": float, "shrink": float, "initial_step": float,
        "eps_clamp": float,
    },
}
REQUIRED = {"graph": ("kind", "nodes"), "experiment": ("n_list",)}


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"unreadable config: {exc}") from exc
    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError("unknown section", f"[{section}]")
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", f"{section}.{key}")
            try:
                values[section][key] = SCHEMA[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r} ({exc})", f"{section}.{key}") from exc
    for section, keys in REQUIRED.items():
        for key in keys:
            if key not in values.get(section, {}):
                raise ConfigError("missing required key", f"{section}.{key}")
    return _build(values)


def _build(values: dict) -> ExperimentConfig:
    g = dict(values["graph"])
    g.setdefault("name", f"{g['kind']}{g['nodes']}")
    m = values.get("model", {})
    e = dict(values["experiment"])
    s = values.get("solver", {})
    if "n_list" in e and not e["n_list"]:
        raise ConfigError("must be nonempty", "experiment.n_list")
    if "lambda" in e:
        e["lam"] = e.pop("lambda")
    try:
        graph = GraphSpec(**g)
    except ParameterError as exc:
        raise ConfigError(str(exc), "graph") from exc
    try:
        model = CascadeModel(**{"kind": "ic", **m})
    except (ParameterError, ValueError) as exc:
        raise ConfigError(str(exc), "model") from exc
    try:
        solver = SolverConfig(**{"tolerance": 1e-6, **s})
    except (ParameterError, ValueError) as exc:
        raise ConfigError(str(exc), "solver") from exc
    try:
        return ExperimentConfig(graph=graph, model=model, solver=solver, **e)
    except ParameterError as exc:
        raise ConfigError(str(exc), "experiment") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    return parse_config_text(text, str(path))


def config_to_dict(config: ExperimentConfig) -> dict:
    """Plain-data echo of a config (used in run manifests)."""
    out = {}
    for f in fields(config):
        v = getattr(config, f.name)
        if f.name == "model":
            v = v.to_dict()
        elif f.name in ("graph", "solver"):
            v = asdict(v)
        out[f.name] = _plain(v)
    return out


def _plain(v):
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v
