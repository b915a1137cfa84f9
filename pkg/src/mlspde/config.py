"""Run configuration: a YAML tree validated against explicit defaults.

Every validation error names the offending key path and its line in the
source file.  ``resolve`` returns a plain nested dict with all defaults
filled in; that dict is what gets embedded into output metadata.
"""

from __future__ import annotations

import copy
import math
from pathlib import Path

import yaml

__all__ = ["ConfigError", "DEFAULTS", "load_config", "resolve", "dump_config"]


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "geometry": {
        "domain": "unit_square:8",  # generator spec ("name:n") or a mesh file path
        "margin": 0.2,  # embedding margin around the bounding box of D
        "embedding_cells": 14,  # coarsest D-bar cells per axis (int or list)
        "levels": 2,  # number of uniform refinements; levels 0 (finest) .. L
    },
    "matern": {
        "sigma2": 1.0,
        "correlation_length": 0.2,
        "kappa": None,  # overrides correlation_length when set
        "g_scale": 1.0,  # multiplies the unit-variance scaling (diagnostics only)
    },
    "sampler": {
        "solver": "hybrid",  # hybrid | hybrid-direct | direct
        "preconditioner": "amg",  # amg | ilu | jacobi | direct
        "rtol": 1e-6,
        "atol": 1e-12,
        "maxit": 1000,
    },
    "darcy": {
        "bc": [
            {"marker": "x0", "type": "dirichlet", "value": 1.0},
            {"marker": "x1", "type": "dirichlet", "value": 0.0},
        ],
        "qoi": "effective_permeability",  # effective_permeability | point_pressure
        "outlet": "x1",
        "point": None,
        "log_k_mean": 0.0,
        "baseline": "constant",  # constant | layered
        "layers": 4,
        "layer_contrast": 1.0,
        "solver": "gmres",  # gmres | direct
        "schur": "direct",  # approximate inverse of the Schur complement: direct | amg | ilu | jacobi
        "ldu_variant": "ldu",  # ldu | diag | lower | upper
        "gs_sweeps": 3,
        "rtol": 1e-6,
        "atol": 1e-12,
        "restart": 50,
        "maxit": 2000,
    },
    "mlmc": {
        "target_mse": 1e-3,
        "warmup": 8,
        "min_samples": 2,
        "max_iterations": 50,
        "max_samples": 100000,
        "cost": "model",  # model | seconds
    },
    "sample": {"count": 10, "level": 0},
    "verify": {
        "samples": 2000,
        "level": 0,
        "probes": 20,
        "bootstrap": 200,
        "n_se": 3.0,
        "max_fail_fraction": 0.05,
        "max_distance": None,  # default: twice the correlation length
        "min_distance": None,  # default: three embedding cells
        "inset": None,  # default: the correlation length, when D leaves room
        "probe_seed": 0,
    },
    "transfer": {"leaf_capacity": 8, "max_depth": 20},
    "run": {"seed": 1, "workers": 1, "out": "out", "plots": True},
}

CHOICES = {
    ("sampler", "solver"): ("hybrid", "hybrid-direct", "direct"),
    ("sampler", "preconditioner"): ("amg", "ilu", "jacobi", "direct"),
    ("darcy", "qoi"): ("effective_permeability", "point_pressure"),
    ("darcy", "baseline"): ("constant", "layered"),
    ("darcy", "solver"): ("gmres", "direct"),
    ("darcy", "schur"): ("direct", "amg", "ilu", "jacobi"),
    ("darcy", "ldu_variant"): ("ldu", "diag", "lower", "upper"),
    ("mlmc", "cost"): ("model", "seconds"),
}

POSITIVE = {
    ("matern", "sigma2"), ("matern", "correlation_length"), ("matern", "kappa"), ("matern", "g_scale"),
    ("sampler", "rtol"), ("sampler", "maxit"), ("darcy", "rtol"), ("darcy", "restart"), ("darcy", "maxit"),
    ("darcy", "layers"), ("mlmc", "target_mse"), ("mlmc", "max_iterations"), ("mlmc", "max_samples"),
    ("verify", "probes"), ("verify", "bootstrap"), ("verify", "n_se"),
    ("transfer", "leaf_capacity"), ("run", "workers"), ("verify", "max_distance"),
}
NONNEGATIVE = {
    ("geometry", "margin"), ("geometry", "levels"), ("sampler", "atol"), ("darcy", "atol"),
    ("darcy", "gs_sweeps"), ("darcy", "layer_contrast"), ("mlmc", "warmup"), ("mlmc", "min_samples"),
    ("sample", "count"), ("sample", "level"), ("verify", "samples"), ("verify", "level"),
    ("verify", "max_fail_fraction"), ("verify", "min_distance"), ("verify", "inset"),
    ("transfer", "max_depth"), ("run", "seed"), ("verify", "probe_seed"),
}
INTEGER = {
    ("geometry", "levels"), ("sampler", "maxit"), ("darcy", "restart"), ("darcy", "maxit"), ("darcy", "gs_sweeps"),
    ("darcy", "layers"), ("mlmc", "warmup"), ("mlmc", "min_samples"), ("mlmc", "max_iterations"),
    ("mlmc", "max_samples"), ("sample", "count"), ("sample", "level"), ("verify", "samples"), ("verify", "level"),
    ("verify", "probes"), ("verify", "bootstrap"), ("transfer", "leaf_capacity"), ("transfer", "max_depth"),
    ("run", "seed"), ("run", "workers"), ("verify", "probe_seed"),
}


def _line_index(node, path=(), out=None):
    """Map key paths to 1-based source lines from a composed YAML node tree."""
    out = {} if out is None else out
    out[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            _line_index(v, path + (key,), out)
            out[path + (key,)] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_index(v, path + (i,), out)
    return out


def _where(lines, path, source):
    line = lines.get(tuple(path))
    key = ".".join(str(p) for p in path) or "<root>"
    loc = f"{source}:{line}" if line is not None else source
    return f"{loc}: {key}"


def _check_number(value, path, lines, source, integer):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{_where(lines, path, source)}: expected a number, got {value!r}")
    if integer and not float(value).is_integer():
        raise ConfigError(f"{_where(lines, path, source)}: expected an integer, got {value!r}")
    if not math.isfinite(value):
        raise ConfigError(f"{_where(lines, path, source)}: value must be finite")


def _merge(defaults: dict, given: dict, path, lines, source) -> dict:
    out = copy.deepcopy(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"{_where(lines, path, source)}: expected a mapping")
    for key, value in given.items():
        p = path + (key,)
        if key not in defaults:
            known = ", ".join(sorted(defaults))
            raise ConfigError(f"{_where(lines, p, source)}: unknown key (expected one of: {known})")
        if isinstance(defaults[key], dict):
            out[key] = _merge(defaults[key], value if value is not None else {}, p, lines, source)
        else:
            out[key] = value
    return out


def _validate(cfg: dict, lines: dict, source: str) -> dict:
    for (sec, key), allowed in CHOICES.items():
        v = cfg[sec][key]
        if v not in allowed:
            raise ConfigError(f"{_where(lines, (sec, key), source)}: must be one of {list(allowed)}, got {v!r}")
    for sec, block in cfg.items():
        for key, v in block.items():
            p = (sec, key)
            if v is None or p in CHOICES:
                continue
            if p in POSITIVE or p in NONNEGATIVE or p in INTEGER:
                _check_number(v, p, lines, source, p in INTEGER)
                if p in INTEGER:
                    block[key] = int(v)
                else:
                    block[key] = float(v)
                if p in POSITIVE and v <= 0:
                    raise ConfigError(f"{_where(lines, p, source)}: must be positive, got {v!r}")
                if p in NONNEGATIVE and v < 0:
                    raise ConfigError(f"{_where(lines, p, source)}: must be nonnegative, got {v!r}")
    g = cfg["geometry"]
    if not isinstance(g["domain"], (str, dict)):
        raise ConfigError(f"{_where(lines, ('geometry', 'domain'), source)}: expected a generator spec or a path")
    cells = g["embedding_cells"]
    cells_list = cells if isinstance(cells, list) else [cells]
    for i, c in enumerate(cells_list):
        p = ("geometry", "embedding_cells") + ((i,) if isinstance(cells, list) else ())
        _check_number(c, p, lines, source, True)
        if c < 1:
            raise ConfigError(f"{_where(lines, p, source)}: must be at least 1")
    m = cfg["matern"]
    if m["kappa"] is None and m["correlation_length"] is None:
        raise ConfigError(f"{_where(lines, ('matern',), source)}: set correlation_length or kappa")
    d = cfg["darcy"]
    if not isinstance(d["bc"], list) or not d["bc"]:
        raise ConfigError(f"{_where(lines, ('darcy', 'bc'), source)}: expected a nonempty list of boundary conditions")
    for i, bc in enumerate(d["bc"]):
        p = ("darcy", "bc", i)
        if not isinstance(bc, dict) or set(bc) - {"marker", "type", "value"} or "marker" not in bc or "type" not in bc:
            raise ConfigError(f"{_where(lines, p, source)}: each entry needs marker, type and optional value")
        if bc["type"] not in ("dirichlet", "noflow"):
            raise ConfigError(f"{_where(lines, p + ('type',), source)}: type must be 'dirichlet' or 'noflow'")
        bc.setdefault("value", 0.0)
        _check_number(bc["value"], p + ("value",), lines, source, False)
    if d["qoi"] == "point_pressure" and d["point"] is None:
        raise ConfigError(f"{_where(lines, ('darcy', 'point'), source)}: point_pressure needs darcy.point")
    if cfg["sample"]["level"] > g["levels"]:
        raise ConfigError(f"{_where(lines, ('sample', 'level'), source)}: level exceeds geometry.levels")
    if cfg["verify"]["level"] > g["levels"]:
        raise ConfigError(f"{_where(lines, ('verify', 'level'), source)}: level exceeds geometry.levels")
    return cfg


def resolve(data: dict | None = None, lines: dict | None = None, source: str = "<config>") -> dict:
    """Defaults merged with ``data`` and validated."""
    lines = lines or {}
    cfg = _merge(DEFAULTS, data or {}, (), lines, source)
    return _validate(cfg, lines, source)


def load_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark else str(path)
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from exc
    lines = _line_index(node) if node is not None else {}
    return resolve(data, lines, str(path))


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False, default_flow_style=False)
