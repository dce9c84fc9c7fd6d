"""Experiment configuration: JSON text in, validated ExperimentConfig (or every violation) out."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .grid import POTENTIAL_FAMILIES, DomainError, DomainSpec, Grid, potential_from_config

PIPELINES = (
    "forward",
    "dtn",
    "cgo-check",
    "carleman",
    "extract",
    "extract-partial",
    "reconstruct",
    "vessella",
    "stability-full",
    "stability-partial",
    "identifiability",
)

DEFAULTS = {
    "domain": {
        "center": [0.0, 0.0, 0.0],
        "half_widths": [0.5, 0.5, 0.5],
        "nodes_per_axis": [17, 17, 17],
        "enclosing_radius": None,
        "torus_padding": 2.0,
        "alpha": [0.0, 0.0, 1.0],
        "epsilon": 0.1,
    },
    "M": 5.0,
    "potentials": {
        "q1": {"family": "constant", "value": 0.0},
        "p": {"family": "gaussian_bump", "center": [0.0, 0.0, 0.0], "sigma": 0.15, "amplitude": 1.0},
    },
    "pipelines": ["forward"],
    "sweeps": {
        "h": [0.2, 0.1, 0.05],
        "t": [1e-1, 1e-2, 1e-3, 1e-4],
        "grids": [17, 25, 33],
        "xi": [[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 2.0, 0.0], [2.0, 2.0, 0.0], [1.0, 0.0, 2.0]],
        "eps": 0.1,
        "theta": 0.5,
        "kmax": 4,
    },
    "cone": {"half_angle": 0.2, "n_dirs": 7, "density": 2, "fit_nodes": 7},
    "mode": "free",
    "rho": 3.0,
    "h0": 0.2,
    "seeds": {"carleman": 0, "noise": 0},
    "output_dir": "out",
    "cache_dir": "cache",
}


@dataclass
class ExperimentConfig:
    domain: dict
    M: float
    potentials: dict
    pipelines: list
    sweeps: dict
    cone: dict
    mode: str
    rho: float
    h0: float
    seeds: dict
    output_dir: str
    cache_dir: str
    raw: dict = field(default_factory=dict, repr=False)

    def domain_spec(self, nodes=None):
        d = self.domain
        return DomainSpec(
            center=tuple(d["center"]),
            half_widths=tuple(d["half_widths"]),
            nodes_per_axis=tuple(d["nodes_per_axis"]) if nodes is None else (nodes,) * 3,
            enclosing_radius=d["enclosing_radius"],
            torus_padding=d["torus_padding"],
        )

    def grid(self, nodes=None):
        return Grid(self.domain_spec(nodes))

    def potential(self, name, grid=None):
        return potential_from_config(grid or self.grid(), self.potentials[name])

    def to_dict(self):
        return copy.deepcopy(self.raw)

    def dumps(self):
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def digest(self):
        return hashlib.sha256(json.dumps(self.raw, sort_keys=True).encode()).hexdigest()[:16]


class ConfigError(ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "potentials":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _is_num(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v)


def _vec(v, n=3):
    return isinstance(v, list) and len(v) == n and all(_is_num(x) for x in v)


def _check(raw):
    errs = []
    unknown = set(raw) - set(DEFAULTS)
    errs += [f"{k}: unknown key" for k in sorted(unknown)]
    d = raw["domain"]
    for k in sorted(set(d) - set(DEFAULTS["domain"])):
        errs.append(f"domain.{k}: unknown key")
    shape_errs = [f"domain.{k}: expected a list of 3 numbers" for k in ("center", "half_widths") if not _vec(d.get(k))]
    n = d.get("nodes_per_axis")
    if isinstance(n, int):
        n = d["nodes_per_axis"] = [n] * 3
    if not (isinstance(n, list) and len(n) == 3 and all(isinstance(v, int) and not isinstance(v, bool) for v in n)):
        shape_errs.append("domain.nodes_per_axis: expected 3 integers")
    errs += shape_errs
    if not _vec(d.get("alpha")):
        errs.append("domain.alpha: expected a list of 3 numbers")
    if not _is_num(d.get("epsilon")) or not 0 <= d["epsilon"] <= 2:
        errs.append("domain.epsilon: expected a number in [0, 2]")
    if _vec(d.get("alpha")) and abs(np.linalg.norm(d["alpha"]) - 1) > 1e-10:
        errs.append("domain.alpha: must be a unit vector")
    grid = None
    if not shape_errs:
        try:
            grid = Grid(DomainSpec(tuple(d["center"]), tuple(d["half_widths"]), tuple(n), d["enclosing_radius"],
                                   d["torus_padding"]))
        except (DomainError, TypeError, ValueError) as exc:
            errs.append(f"domain: {exc}")

    M = raw["M"]
    if not _is_num(M) or M <= 0:
        errs.append("M: expected a positive number")
        M = None

    pots = raw["potentials"]
    if not isinstance(pots, dict) or not pots:
        errs.append("potentials: expected a nonempty mapping")
        pots = {}
    bounds = {}
    for name, spec in pots.items():
        key = f"potentials.{name}"
        if not isinstance(spec, dict) or spec.get("family") not in POTENTIAL_FAMILIES:
            errs.append(f"{key}.family: expected one of {sorted(POTENTIAL_FAMILIES)}")
            continue
        if grid is None:
            continue
        try:
            bounds[name] = potential_from_config(grid, spec).bound
        except (TypeError, ValueError) as exc:
            errs.append(f"{key}: {exc}")
            continue
        if M is not None and bounds[name] > M:
            errs.append(f"{key}: bound {bounds[name]:g} exceeds M = {M:g}")
    if "q1" not in pots:
        errs.append("potentials.q1: required")

    sw = raw["sweeps"]
    for k in sorted(set(sw) - set(DEFAULTS["sweeps"])):
        errs.append(f"sweeps.{k}: unknown key")
    for k in ("h", "t", "grids", "xi"):
        v = sw.get(k)
        if not isinstance(v, list) or len(v) == 0:
            errs.append(f"sweeps.{k}: sweeps nonempty")
    if isinstance(sw.get("h"), list) and not all(_is_num(v) and 0 < v < 1 for v in sw["h"]):
        errs.append("sweeps.h: entries must lie in (0, 1)")
    if isinstance(sw.get("t"), list) and not all(_is_num(v) for v in sw["t"]):
        errs.append("sweeps.t: entries must be numbers")
    if isinstance(sw.get("grids"), list) and not all(isinstance(v, int) and v >= 9 and v % 2 == 1 for v in sw["grids"]):
        errs.append("sweeps.grids: entries must be odd integers >= 9")
    if isinstance(sw.get("xi"), list) and not all(_vec(v) for v in sw["xi"]):
        errs.append("sweeps.xi: entries must be lists of 3 numbers")
    if not _is_num(sw.get("theta")) or not 0 < sw["theta"] < 1:
        errs.append("sweeps.theta: expected a number in (0, 1)")
    if not _is_num(sw.get("eps")) or not 0 <= sw["eps"] <= 2:
        errs.append("sweeps.eps: expected a number in [0, 2]")
    if not isinstance(sw.get("kmax"), int) or sw["kmax"] < 1:
        errs.append("sweeps.kmax: expected a positive integer")

    # q1 + t p must stay in the admissible class for every swept t
    if M is not None and "q1" in bounds and "p" in bounds and isinstance(sw.get("t"), list):
        ts = [v for v in sw["t"] if _is_num(v)]
        if ts and bounds["q1"] + max(abs(v) for v in ts) * bounds["p"] > M:
            errs.append(f"sweeps.t: q1 + t p may exceed M = {M:g} for the largest |t|")

    pl = raw["pipelines"]
    if not isinstance(pl, list) or not pl:
        errs.append("pipelines: expected a nonempty list")
    else:
        errs += [f"pipelines: unknown pipeline {p!r}" for p in pl if p not in PIPELINES]

    cone = raw["cone"]
    if not _is_num(cone.get("half_angle")) or not 0 <= cone["half_angle"] < 1.5:
        errs.append("cone.half_angle: expected a number in [0, 1.5)")
    for k in ("n_dirs", "density", "fit_nodes"):
        if not isinstance(cone.get(k), int) or cone[k] < 1:
            errs.append(f"cone.{k}: expected a positive integer")
    if raw["mode"] not in ("oracle", "free"):
        errs.append("mode: expected 'oracle' or 'free'")
    for k in ("rho", "h0"):
        if not _is_num(raw[k]) or raw[k] <= 0:
            errs.append(f"{k}: expected a positive number")
    if not isinstance(raw["seeds"], dict) or not all(isinstance(v, int) for v in raw["seeds"].values()):
        errs.append("seeds: expected a mapping of integers")
    for k in ("output_dir", "cache_dir"):
        if not isinstance(raw[k], str) or not raw[k]:
            errs.append(f"{k}: expected a nonempty string")
    return errs


def validate_config(text: Union[str, dict]) -> Union[ExperimentConfig, list]:
    """Parse and check a config; returns the config or the full list of violations."""
    if isinstance(text, dict):
        user = text
    else:
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            return [f"<root>: invalid JSON ({exc})"]
    if not isinstance(user, dict):
        return ["<root>: expected a JSON object"]
    raw = _merge(DEFAULTS, user)
    errs = _check(raw)
    if errs:
        return errs
    return ExperimentConfig(**{k: raw[k] for k in DEFAULTS}, raw=raw)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        res = validate_config(fh.read())
    if isinstance(res, list):
        raise ConfigError(res)
    return res
