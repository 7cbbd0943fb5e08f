"""Scenario configuration: YAML loading and a few canned scenarios.

A config file looks like::

    horizon: 1.0
    components:
      - kind: affine_in_y
        c0: 1.0
        c1: 1.0
        time: {kind: constant}
        weight: 1.0
        sigma: {kind: uniform}
    grid: {n_t: 129, n_z: 129, n_b: 129}
    solver: {tolerance: 1.0e-8, max_iter: 60, k_max: null}
    mc: {trajectories: 100000, seed: 20240611, queries: 48}

Rate kinds are ``constant`` (``c``), ``separable`` (``coeffs`` of a
polynomial in ``y`` and a ``time`` factor), ``affine_in_y`` (``c0``, ``c1``,
``time``) and ``tabulated`` (``values`` and ``dwdy`` tables).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import yaml

from .grid import GridSpec
from .model import Density, InitialDensity, RateFunction, RateMixture, ScenarioError, TimeFactor

__all__ = ["ConfigError", "Scenario", "load_config", "parse_config", "builtin", "BUILTIN_NAMES"]


class ConfigError(ValueError):
    """The configuration file cannot be read or has the wrong shape."""


@dataclass
class Scenario:
    name: str
    mixture: RateMixture
    density: InitialDensity
    grid: GridSpec
    tol: float = 1e-8
    max_iter: int = 60
    k_max: int | None = None
    mc_trajectories: int = 100_000
    mc_seed: int = 20240611
    mc_queries: int = 48
    raw: dict = field(default_factory=dict, repr=False)

    def digest(self) -> str:
        """Short hash of the parsed configuration."""
        blob = json.dumps(self.raw, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_grid(self, grid: GridSpec) -> "Scenario":
        out = Scenario(**{**self.__dict__})
        out.grid = grid
        return out


def _num(d: dict, key: str, default=None) -> float:
    if key not in d:
        if default is None:
            raise ConfigError(f"missing key {key!r}")
        return float(default)
    try:
        return float(d[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"key {key!r} is not a number: {d[key]!r}") from exc


def _time_factor(spec) -> TimeFactor:
    if spec is None:
        return TimeFactor()
    if not isinstance(spec, dict):
        raise ConfigError("time factor must be a mapping")
    kind = spec.get("kind", "constant")
    return TimeFactor(kind=kind, slope=_num(spec, "slope", 0.0),
                      amplitude=_num(spec, "amplitude", 0.0),
                      frequency=_num(spec, "frequency", 1.0), rate=_num(spec, "rate", 0.0))


def _rate(spec: dict, horizon: float) -> RateFunction:
    kind = spec.get("kind")
    if kind == "constant":
        return RateFunction.constant(_num(spec, "c"))
    if kind == "separable":
        coeffs = spec.get("coeffs")
        if not isinstance(coeffs, list) or not coeffs:
            raise ConfigError("separable rate needs a non-empty 'coeffs' list")
        return RateFunction.separable([float(c) for c in coeffs], _time_factor(spec.get("time")))
    if kind == "affine_in_y":
        return RateFunction.affine(_num(spec, "c0"), _num(spec, "c1"),
                                   _time_factor(spec.get("time")))
    if kind == "tabulated":
        if "values" not in spec or "dwdy" not in spec:
            raise ConfigError("tabulated rate needs 'values' and 'dwdy' tables")
        return RateFunction.tabulated(spec["values"], spec["dwdy"], horizon)
    raise ConfigError(f"unknown rate kind {kind!r}")


def _density(spec) -> Density:
    if spec is None:
        return Density()
    if not isinstance(spec, dict):
        raise ConfigError("sigma must be a mapping")
    kind = spec.get("kind", "uniform")
    if kind == "uniform":
        return Density()
    if kind == "polynomial":
        return Density.polynomial(spec["coeffs"])
    if kind == "tabulated":
        return Density.tabulated(spec["values"])
    raise ConfigError(f"unknown density kind {kind!r}")


def parse_config(raw: dict, name: str = "config") -> Scenario:
    """Build a :class:`Scenario` from a parsed mapping.

    Shape errors raise :class:`ConfigError`; violated model assumptions are
    left to :func:`~mixflow.model.validate_scenario`.
    """
    if not isinstance(raw, dict):
        raise ConfigError("top level of the config must be a mapping")
    horizon = _num(raw, "horizon")
    comps = raw.get("components")
    if not isinstance(comps, list) or not comps:
        raise ConfigError("'components' must be a non-empty list")
    rates, weights, sigmas = [], [], []
    try:
        for c in comps:
            if not isinstance(c, dict):
                raise ConfigError("each component must be a mapping")
            rates.append(_rate(c, horizon))
            weights.append(_num(c, "weight"))
            sigmas.append(_density(c.get("sigma")))
        mixture = RateMixture(tuple(rates), tuple(weights), horizon)
    except ScenarioError as exc:
        raise ConfigError(str(exc)) from exc
    g = raw.get("grid") or {}
    n_t = int(g.get("n_t", 129))
    n_z = int(g.get("n_z", 129))
    n_b = int(g.get("n_b", n_t))
    if n_b != n_t:
        raise ConfigError("boundary nodes coincide with time nodes: n_b must equal n_t")
    try:
        grid = GridSpec(horizon, n_t, n_z)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    s = raw.get("solver") or {}
    mc = raw.get("mc") or {}
    k_max = s.get("k_max")
    return Scenario(
        name=str(raw.get("name", name)),
        mixture=mixture,
        density=InitialDensity(tuple(sigmas)),
        grid=grid,
        tol=_num(s, "tolerance", 1e-8),
        max_iter=int(s.get("max_iter", 60)),
        k_max=None if k_max is None else int(k_max),
        mc_trajectories=int(mc.get("trajectories", 100_000)),
        mc_seed=int(mc.get("seed", 20240611)),
        mc_queries=int(mc.get("queries", 48)),
        raw=raw,
    )


def load_config(path) -> Scenario:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(raw, name=str(path))


# --------------------------------------------------------------------------
# canned scenarios

def _tab_rate(horizon: float, n: int = 9) -> dict:
    y = np.linspace(0.0, 1.0, n)[:, None]
    t = np.linspace(0.0, horizon, n)[None, :]
    vals = 0.5 + y + 0.25 * t
    return {"kind": "tabulated", "values": vals.tolist(),
            "dwdy": np.ones_like(vals).tolist(), "weight": 1.0}


def _raw(name: str) -> dict:
    uni = {"kind": "uniform"}
    if name == "zero":
        comps = [{"kind": "constant", "c": 0.0, "weight": 1.0}]
        T = 1.0
    elif name == "constant":
        comps = [{"kind": "constant", "c": 1.0, "weight": 1.0}]
        T = 1.0
    elif name == "two_constant":
        comps = [{"kind": "constant", "c": 1.0, "weight": 0.5},
                 {"kind": "constant", "c": 3.0, "weight": 0.5}]
        T = 1.0
    elif name == "affine":
        comps = [{"kind": "affine_in_y", "c0": 1.0, "c1": 1.0, "weight": 1.0}]
        T = 1.0
    elif name == "tabulated":
        T = 1.0
        comps = [_tab_rate(T)]
    elif name == "sinusoidal":
        # spatially independent and time varying
        comps = [{"kind": "separable", "coeffs": [1.0],
                  "time": {"kind": "sin", "amplitude": 0.5, "frequency": 1.0}, "weight": 0.5},
                 {"kind": "separable", "coeffs": [2.0],
                  "time": {"kind": "linear", "slope": 1.0}, "weight": 0.5}]
        T = 1.0
    elif name == "low_rate":
        comps = [{"kind": "affine_in_y", "c0": 0.1, "c1": 0.1, "weight": 1.0}]
        T = 0.5
    elif name == "mixed":
        # two components with position-dependent rates and non-uniform densities
        comps = [{"kind": "affine_in_y", "c0": 0.5, "c1": 1.0, "weight": 0.5,
                  "sigma": {"kind": "polynomial", "coeffs": [0.5, 1.0]}},
                 {"kind": "constant", "c": 2.0, "weight": 0.5,
                  "sigma": {"kind": "polynomial", "coeffs": [1.5, -1.0]}}]
        T = 1.0
    else:
        raise KeyError(f"unknown scenario {name!r}; choose from {BUILTIN_NAMES}")
    for c in comps:
        c.setdefault("sigma", dict(uni))
    return {"name": name, "horizon": T, "components": comps}


BUILTIN_NAMES = ("zero", "constant", "two_constant", "affine", "tabulated", "sinusoidal",
                 "low_rate", "mixed")


def builtin(name: str, n_t: int = 129, n_z: int = 129) -> Scenario:
    """One of :data:`BUILTIN_NAMES` on an ``n_t x n_z`` grid."""
    raw = _raw(name)
    raw["grid"] = {"n_t": n_t, "n_z": n_z}
    return parse_config(raw, name=name)
