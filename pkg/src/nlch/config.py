"""TOML run configurations: schema, validation and canonical serialization.

Every key lives in :data:`SCHEMA` with its type, default and bounds; unknown
keys are rejected and all problems are reported together. Numeric monitor
tolerances live in the ``[tolerances]`` section (see :data:`TOLERANCES`).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Any

import tomli
import tomli_w

from .kernels import FAMILIES, KernelError, make_kernel

SCHEMA_VERSION = 1

INITIAL_FAMILIES = ("gaussian-blob", "double-bump", "perturbed-constant", "from-file")

# Default pass/fail thresholds of the invariant monitors.
TOLERANCES = {
    "mass_drift": 1e-12,        # relative mass change over a run
    "positivity": 1e-12,        # min rho >= -positivity * max rho at every step
    "residual": 1e-2,           # normalized dissipation and moment residuals
    "monotone_factor": 10.0,    # E and Phi may rise by monotone_factor * residual * scale
    "sweep_slope_floor": 1.0,   # fitted log-log slope of sup_t L1 distances
    "center_of_mass": 1e-12,    # particle center-of-mass drift
}


@dataclass(frozen=True)
class Field:
    kind: type | tuple
    default: Any = None
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None
    open_lo: bool = False


def _f(default=None, lo=None, hi=None, open_lo=False):
    return Field(float, default, lo, hi, open_lo=open_lo)


def _i(default=None, lo=None, hi=None):
    return Field(int, default, lo, hi)


SCHEMA: dict[str, dict[str, Field]] = {
    "grid": {"d": _i(2, 1, 3), "n": _i(128, 8, 4096), "L": _f(8.0, 0, open_lo=True)},
    "kernel": {"family": Field(str, "gaussian", choices=FAMILIES), "epsilon": _f(0.2, 0),
               "f_family": Field(str, None, choices=FAMILIES)},
    "solver": {"T": _f(0.05, 0), "dt": _f(None, 0, open_lo=True), "dt_max": _f(math.inf, 0, open_lo=True),
               "safety": _f(0.9, 0, 1, open_lo=True), "stabilize": Field(bool, True),
               "cadence": _f(None, 0, open_lo=True)},
    "initial": {"family": Field(str, "gaussian-blob", choices=INITIAL_FAMILIES), "sigma": _f(0.5, 0, open_lo=True),
                "mass": _f(1.0, 0, open_lo=True), "center": Field(list, None), "separation": _f(1.0, 0),
                "sigma2": _f(None, 0, open_lo=True), "mass2": _f(None, 0, open_lo=True),
                "c": _f(1.0, 0, open_lo=True), "amp": _f(0.01, 0, 1), "seed": _i(0, 0), "modes": _i(4, 1, 64),
                "path": Field(str, None)},
    "output": {"dir": Field(str, "out"), "snapshots": Field(bool, True)},
    "sweep": {"epsilons": Field(list, [0.4, 0.2, 0.1, 0.05]), "dt_max": _f(1e-4, 0, open_lo=True)},
    "system": {"A": Field(list, None), "kernels": Field(list, None), "sign": _i(1, -1, 1),
               "species": Field(list, None)},
    "particles": {"N": _i(1000, 1, 10**5), "d": _i(1, 1, 3), "W_family": Field(str, "gaussian", choices=("gaussian", "bump")),
                  "W_scale": _f(0.5, 0, open_lo=True), "sigma0": _f(1.0, 0, open_lo=True), "seed": _i(0, 0),
                  "T": _f(0.5, 0), "dt": _f(0.03, 0, open_lo=True), "snapshot_every": _i(6, 1),
                  "grid_n": _i(256, 8, 4096), "grid_L": _f(16.0, 0, open_lo=True)},
    "tolerances": {k: _f(v, 0, open_lo=True) for k, v in TOLERANCES.items()},
}

COMMAND_SECTIONS = {
    "run": ("grid", "kernel", "solver", "initial", "output", "tolerances"),
    "sweep": ("grid", "kernel", "solver", "initial", "output", "sweep", "tolerances"),
    "system-run": ("grid", "kernel", "solver", "output", "system", "tolerances"),
    "particles": ("particles", "output", "tolerances"),
}


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class RunConfig:
    command: str
    data: dict

    def __getitem__(self, section: str) -> dict:
        return self.data[section]

    def to_toml(self) -> str:
        return serialize(self)

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_toml().encode()).hexdigest()

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.command == other.command and _canon(self.data) == _canon(other.data)


def _canon(d):
    return tomli.loads(tomli_w.dumps(_strip_none(d)))


def _strip_none(d):
    if isinstance(d, dict):
        return {k: _strip_none(v) for k, v in d.items() if v is not None}
    if isinstance(d, list):
        return [_strip_none(v) for v in d]
    return d


def _check_value(where: str, f: Field, v, errors: list):
    if f.kind is float and isinstance(v, int) and not isinstance(v, bool):
        v = float(v)
    if f.kind is float and isinstance(v, str) and v in ("inf", "+inf"):
        v = math.inf
    if not isinstance(v, f.kind) or (f.kind is int and isinstance(v, bool)):
        errors.append(f"{where}: expected {getattr(f.kind, '__name__', f.kind)}, got {type(v).__name__} {v!r}")
        return None
    if f.choices is not None and v not in f.choices:
        errors.append(f"{where}: {v!r} is not one of {list(f.choices)}")
        return None
    if f.kind in (int, float):
        if isinstance(v, float) and math.isnan(v):
            errors.append(f"{where}: NaN is not allowed")
            return None
        if f.lo is not None and (v < f.lo or (f.open_lo and v == f.lo)):
            errors.append(f"{where}: {v!r} out of range (must be {'>' if f.open_lo else '>='} {f.lo})")
            return None
        if f.hi is not None and v > f.hi:
            errors.append(f"{where}: {v!r} out of range (must be <= {f.hi})")
            return None
    return v


def parse_config(text: str, command: str = "run") -> RunConfig:
    """Validated config with defaults filled; raises :class:`ConfigError` listing every problem."""
    if command not in COMMAND_SECTIONS:
        raise ConfigError([f"unknown command {command!r}"])
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        msg = str(exc)
        if "overwrite" in msg.lower():
            msg = f"duplicate key: {msg}"
        raise ConfigError([f"syntax: {msg}"]) from None
    errors: list[str] = []
    allowed = COMMAND_SECTIONS[command]
    for sec in doc:
        if sec not in SCHEMA:
            errors.append(f"unknown section [{sec}]")
        elif sec not in allowed:
            errors.append(f"section [{sec}] is not used by '{command}'")
    data: dict[str, dict] = {}
    for sec in allowed:
        raw = doc.get(sec, {})
        if not isinstance(raw, dict):
            errors.append(f"[{sec}] must be a table")
            raw = {}
        out = {}
        for key, f in SCHEMA[sec].items():
            if key in raw:
                out[key] = _check_value(f"{sec}.{key}", f, raw[key], errors)
            else:
                out[key] = list(f.default) if isinstance(f.default, list) else f.default
        for key in raw:
            if key not in SCHEMA[sec]:
                errors.append(f"unknown key {sec}.{key}")
        data[sec] = out
    _require_seeds(doc, data, errors)
    if not errors:
        _cross_checks(command, data, errors)
    if errors:
        raise ConfigError(errors)
    return RunConfig(command, data)


def _require_seeds(doc, data, errors):
    # stochastic features never fall back to a default seed
    ini = data.get("initial")
    if ini and ini["family"] == "perturbed-constant" and "seed" not in doc.get("initial", {}):
        errors.append("initial.seed: required for perturbed-constant initial data")
    if "particles" in data and "seed" not in doc.get("particles", {}):
        errors.append("particles.seed: required for particle sampling")
    for i, sp in enumerate((doc.get("system") or {}).get("species") or []):
        if isinstance(sp, dict) and sp.get("family") == "perturbed-constant" and "seed" not in sp:
            errors.append(f"system.species[{i}].seed: required for perturbed-constant initial data")


def _cross_checks(command: str, data: dict, errors: list) -> None:
    if command == "particles":
        p = data["particles"]
        n = p["grid_n"]
        if n & (n - 1):
            errors.append(f"particles.grid_n: {n} is not a power of two")
        return
    g = data["grid"]
    if g["n"] & (g["n"] - 1):
        errors.append(f"grid.n: {g['n']} is not a power of two")
        return
    h = g["L"] / g["n"]
    k = data["kernel"]
    eps_list = [k["epsilon"]] if command != "sweep" else list(data["sweep"]["epsilons"])
    if command == "sweep":
        if not eps_list or not all(isinstance(e, (int, float)) and e > 0 for e in eps_list):
            errors.append("sweep.epsilons: must be a nonempty list of positive numbers")
            return
        if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
            errors.append("sweep.epsilons: must be strictly decreasing")
    spec = make_kernel(k["family"], g["d"], k["f_family"])
    for eps in eps_list:
        if eps == 0:
            continue
        need = spec.min_resolution * h
        if eps < need * (1 - 1e-12):
            errors.append(f"resolution guard: epsilon={eps:g} < {spec.min_resolution:g} h = {need:g} "
                          f"for the {k['family']} kernel")
        if math.isfinite(spec.support) and spec.support * eps > g["L"] / 4:
            errors.append(f"support guard: kernel radius {spec.support * eps:g} exceeds L/4")
    s = data["solver"]
    if s["dt"] is not None and s["cadence"] is not None and s["cadence"] < s["dt"]:
        errors.append(f"solver.cadence {s['cadence']:g} is shorter than solver.dt {s['dt']:g}")
    if "initial" in data:
        _check_initial("initial", data["initial"], g, max(eps_list), errors)
    if command == "system-run":
        _check_system(data, errors)


def _check_initial(where, ini, g, eps, errors):
    if ini["center"] is not None:
        if len(ini["center"]) != g["d"] or not all(isinstance(c, (int, float)) for c in ini["center"]):
            errors.append(f"{where}.center: needs {g['d']} numbers")
    if ini["family"] == "from-file" and not ini["path"]:
        errors.append(f"{where}.path: required for from-file initial data")
    if ini["family"] in ("gaussian-blob", "double-bump"):
        width = ini["sigma"] if ini["family"] == "gaussian-blob" else (
            max(ini["sigma"], ini["sigma2"] or ini["sigma"]) + ini["separation"] / 2)
        if g["L"] < 16 * max(eps, width) * (1 - 1e-12):
            errors.append(f"seam guard: L={g['L']:g} < 16 * max(epsilon, data width) = {16 * max(eps, width):g}")


def _check_system(data, errors):
    sysc, g = data["system"], data["grid"]
    A = sysc["A"]
    if not A or not all(isinstance(r, list) for r in A) or any(len(r) != len(A) for r in A):
        errors.append("system.A: must be a square matrix (list of rows)")
        return
    N = len(A)
    if sysc["sign"] not in (1, -1):
        errors.append("system.sign: must be +1 or -1")
    kern = sysc["kernels"]
    if kern is not None and (len(kern) != N or any(k not in FAMILIES for k in kern)):
        errors.append(f"system.kernels: needs {N} families from {list(FAMILIES)}")
    species = sysc["species"]
    if not species or len(species) != N:
        errors.append(f"system.species: needs {N} [[system.species]] tables")
        return
    resolved = []
    for i, sp in enumerate(species):
        out = {}
        for key, f in SCHEMA["initial"].items():
            out[key] = _check_value(f"system.species[{i}].{key}", f, sp[key], errors) if key in sp else f.default
        for key in sp:
            if key not in SCHEMA["initial"]:
                errors.append(f"unknown key system.species[{i}].{key}")
        _check_initial(f"system.species[{i}]", out, g, data["kernel"]["epsilon"], errors)
        resolved.append(out)
    sysc["species"] = resolved


def serialize(cfg: RunConfig) -> str:
    """Canonical TOML of the resolved config (``None`` values omitted, infinities as inf)."""
    return f"# nlch {cfg.command} configuration (schema {SCHEMA_VERSION})\n" + tomli_w.dumps(_strip_none(cfg.data))


def load_config(path, command: str) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), command)


def validate_kernel(family: str, d: int) -> None:
    try:
        make_kernel(family, d)
    except KernelError as exc:
        raise ConfigError([str(exc)]) from None
