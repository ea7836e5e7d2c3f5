"""Run configuration: TOML in, validated nested dict out.

Every key has a default; unknown keys and type mismatches are errors that
name the offending field path (``mcmc.steps``).  The resolved config, with
defaults filled in, is what gets echoed into run directories.
"""

from __future__ import annotations

import copy
import json
import math
import sys
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

import numpy as np

from .kernels import MCMCConfig, centered_cube
from .measures import LoopMeasureSpec
from .paths import Domain, TimeGrid
from .potentials import FAMILIES, ModelParams, make_potential

__all__ = ["ConfigError", "DEFAULTS", "load_config", "resolve", "apply_override", "dumps_resolved", "Run"]


class ConfigError(ValueError):
    """Invalid run configuration; the message starts with the field path."""

    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


_OPT_FLOAT = "float?"

DEFAULTS: dict[str, dict[str, Any]] = {
    "model": {"d": 3, "beta": 1.0, "mu": 0.0},
    "potential": {"family": "zero", "A": None, "a": None, "sigma": None, "r_cut": None},
    "grid": {"m": 16},
    "measure": {"j_max": 64, "tail_tol": 1e-6},
    "domain": {"lower": None, "upper": None, "side": 2.0, "window_lower": None, "window_upper": None},
    "mcmc": {
        "steps": 20000,
        "burn_in": 10000,
        "thin": 10,
        "p_birth": 0.35,
        "p_death": 0.35,
        "p_move": 0.30,
        "rejection_cap": 10000,
        "on_rejection_cap": "skip",
        "check_every": 0,
    },
    "seeds": {"master": 0, "replicas": 1},
    "outputs": {"dir": "run", "snapshots": False, "snapshot_cap_bytes": 50_000_000},
    "sample": {"draws": 100},
    "estimate": {"samples": 2000, "kind": "dirichlet", "j_min": 4, "j_max": 24},
    "gn": {"n": 2, "window": 1, "shift": True},
    "verify": {
        "alpha": 0.01,
        "z": 3.0,
        "samples": 1000,
        "inner_steps": 200,
        "c": 0.25,
        "tail_j": [1, 4, 16],
        "tail_samples": 50000,
        "eps": 0.01,
        "tempered_alpha": 0.5,
        "n_max": 4,
        "ph_samples": 20000,
        "oracle_samples": 200000,
    },
}

_TYPES: dict[str, dict[str, Any]] = {
    "model": {"d": int, "beta": float, "mu": float},
    "potential": {"family": str, "A": _OPT_FLOAT, "a": _OPT_FLOAT, "sigma": _OPT_FLOAT, "r_cut": _OPT_FLOAT},
    "grid": {"m": int},
    "measure": {"j_max": int, "tail_tol": float},
    "domain": {
        "lower": "vec?",
        "upper": "vec?",
        "side": float,
        "window_lower": "vec?",
        "window_upper": "vec?",
    },
    "mcmc": {
        "steps": int,
        "burn_in": int,
        "thin": int,
        "p_birth": float,
        "p_death": float,
        "p_move": float,
        "rejection_cap": int,
        "on_rejection_cap": str,
        "check_every": int,
    },
    "seeds": {"master": int, "replicas": int},
    "outputs": {"dir": str, "snapshots": bool, "snapshot_cap_bytes": int},
    "sample": {"draws": int},
    "estimate": {"samples": int, "kind": str, "j_min": int, "j_max": int},
    "gn": {"n": int, "window": int, "shift": bool},
    "verify": {
        "alpha": float,
        "z": float,
        "samples": int,
        "inner_steps": int,
        "c": float,
        "tail_j": "ints",
        "tail_samples": int,
        "eps": float,
        "tempered_alpha": float,
        "n_max": int,
        "ph_samples": int,
        "oracle_samples": int,
    },
}


def _coerce(path: str, kind, value):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if kind is float or kind == _OPT_FLOAT:
        if value is None and kind == _OPT_FLOAT:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        if not math.isfinite(value):
            raise ConfigError(path, "must be finite")
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if kind == "vec?":
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of numbers, got {value!r}")
        return [float(v) for v in value]
    if kind == "ints":
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return list(value)
    raise AssertionError(kind)


def resolve(raw: dict) -> dict:
    """Merge ``raw`` over the defaults and validate every field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a table")
    out = copy.deepcopy(DEFAULTS)
    for section, body in raw.items():
        if section not in DEFAULTS:
            raise ConfigError(section, "unknown section")
        if not isinstance(body, dict):
            raise ConfigError(section, "expected a table")
        for key, value in body.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(f"{section}.{key}", "unknown key")
            out[section][key] = _coerce(f"{section}.{key}", _TYPES[section][key], value)
    _check(out)
    return out


def _need(cond: bool, path: str, msg: str):
    if not cond:
        raise ConfigError(path, msg)


def _check(c: dict) -> None:
    m = c["model"]
    _need(m["d"] >= 3, "model.d", "dimension must be >= 3")
    _need(m["beta"] > 0, "model.beta", "must be positive")
    p = c["potential"]
    _need(p["family"] in FAMILIES, "potential.family", f"must be one of {sorted(FAMILIES)}")
    needed = {"hard_core": ("a",), "gaussian": ("A", "sigma"), "compact_bump": ("A", "a"), "zero": ()}[p["family"]]
    for k in needed:
        _need(p[k] is not None and p[k] > 0, f"potential.{k}", f"required and positive for {p['family']}")
    for k in ("A", "a", "sigma"):
        if k not in needed:
            _need(p[k] is None, f"potential.{k}", f"not a parameter of {p['family']}")
    _need(p["r_cut"] is None or p["r_cut"] > 0, "potential.r_cut", "must be positive")
    _need(c["grid"]["m"] >= 2, "grid.m", "must be >= 2")
    _need(c["measure"]["j_max"] >= 1, "measure.j_max", "must be >= 1")
    _need(c["measure"]["tail_tol"] > 0, "measure.tail_tol", "must be positive")
    dom = c["domain"]
    for a, b in (("lower", "upper"), ("window_lower", "window_upper")):
        _need((dom[a] is None) == (dom[b] is None), f"domain.{a}", f"give both {a} and {b} or neither")
        if dom[a] is not None:
            _need(len(dom[a]) == m["d"] and len(dom[b]) == m["d"], f"domain.{a}", "corner length must equal model.d")
            _need(all(x < y for x, y in zip(dom[a], dom[b])), f"domain.{b}", "must exceed the lower corner componentwise")
    _need(dom["side"] > 0, "domain.side", "must be positive")
    mc = c["mcmc"]
    try:
        MCMCConfig(**mc)
    except ValueError as exc:
        raise ConfigError("mcmc", str(exc)) from None
    s = c["seeds"]
    _need(s["master"] >= 0, "seeds.master", "must be non-negative")
    _need(s["replicas"] >= 1, "seeds.replicas", "must be >= 1")
    _need(c["outputs"]["snapshot_cap_bytes"] >= 0, "outputs.snapshot_cap_bytes", "must be non-negative")
    _need(c["sample"]["draws"] >= 1, "sample.draws", "must be >= 1")
    e = c["estimate"]
    _need(e["samples"] >= 2, "estimate.samples", "must be >= 2")
    _need(e["kind"] in ("dirichlet", "free", "excursion"), "estimate.kind", "must be dirichlet, free or excursion")
    _need(1 <= e["j_min"] < e["j_max"], "estimate.j_max", "need 1 <= j_min < j_max")
    _need(c["gn"]["n"] >= 1, "gn.n", "must be >= 1")
    _need(c["gn"]["window"] >= 1, "gn.window", "must be >= 1")
    v = c["verify"]
    _need(0 < v["alpha"] < 1, "verify.alpha", "must lie in (0, 1)")
    _need(v["z"] > 0, "verify.z", "must be positive")
    _need(0 < v["tempered_alpha"] <= 1, "verify.tempered_alpha", "must lie in (0, 1]")
    _need(0 < v["eps"] < 1, "verify.eps", "must lie in (0, 1)")
    _need(v["n_max"] >= 1, "verify.n_max", "must be >= 1")
    _need(all(j >= 1 for j in v["tail_j"]) and v["tail_j"], "verify.tail_j", "need positive lengths")
    for k in ("samples", "inner_steps", "tail_samples", "ph_samples", "oracle_samples"):
        _need(v[k] >= 1, f"verify.{k}", "must be >= 1")


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve({})
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("<file>", f"not valid TOML: {exc}") from None
    return resolve(raw)


def apply_override(cfg: dict, *assignments: str) -> dict:
    """Apply ``section.key=value`` assignments (values in TOML syntax), then revalidate once."""
    raw = copy.deepcopy(cfg)
    for assignment in assignments:
        if "=" not in assignment or "." not in assignment.split("=", 1)[0]:
            raise ConfigError(assignment, "override must look like section.key=value")
        lhs, rhs = assignment.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        try:
            value = tomllib.loads(f"v = {rhs.strip()}")["v"]
        except tomllib.TOMLDecodeError:
            value = rhs.strip()
        if section not in raw or not isinstance(raw[section], dict):
            raise ConfigError(section, "unknown section")
        raw[section][key] = value
    return resolve(raw)


def dumps_resolved(cfg: dict, extra: dict | None = None) -> str:
    body = dict(cfg)
    if extra:
        body = {**body, **extra}
    return json.dumps(body, sort_keys=True, indent=2) + "\n"


class Run:
    """Typed views of a resolved config."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        m, p = cfg["model"], cfg["potential"]
        params = {k: p[k] for k in ("A", "a", "sigma") if p[k] is not None}
        self.potential = make_potential(p["family"], r_cut=p["r_cut"], **params)
        self.params = ModelParams(m["d"], m["beta"], m["mu"], self.potential)
        self.grid = TimeGrid(m["beta"], cfg["grid"]["m"])
        dom = cfg["domain"]
        if dom["lower"] is not None:
            self.domain = Domain(np.array(dom["lower"]), np.array(dom["upper"]))
        else:
            self.domain = Domain(np.zeros(m["d"]), np.full(m["d"], dom["side"]))
        if dom["window_lower"] is not None:
            self.window = Domain(np.array(dom["window_lower"]), np.array(dom["window_upper"]))
        else:
            lo, hi = self.domain.lo, self.domain.hi
            third = (hi - lo) / 3
            self.window = Domain(lo + third, hi - third)
        meas = cfg["measure"]
        self.spec = LoopMeasureSpec(self.domain, self.params, self.grid, meas["j_max"], meas["tail_tol"])
        self.mcmc = MCMCConfig(**cfg["mcmc"])

    def cube(self, n: float) -> Domain:
        return centered_cube(n, self.params.d)
