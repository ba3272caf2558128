"""Run configuration: YAML schema, defaults and validation.

Every block is optional; missing keys take the defaults below. Validation
collects every problem before reporting, and unknown keys are errors.
"""

from __future__ import annotations

import copy
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .model import RegimeWarning, regime_violations

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "grid": {"dim": 1, "n_per_dim": 128, "box_length": 20.0},
    "model": {"lambda": 1.0, "alpha": -1, "sigma": 1.0, "kappa": "auto"},
    "noise": {"amplitude": 1.0, "decay": 4.0, "cutoff": None, "noise_kind": "circular"},
    "integrator": {"dt": 0.01, "padding_factor": 1.0, "stride": 10, "blowup_ceiling": 1e6},
    "experiment": {
        "horizon": 2.0,
        "n_paths": 100,
        "theta": 1.0,
        "beta": 1.0,
        "block_length": 0.5,
        "moment_index": 1,
        "c1n": 1.0,
        "slope_constant": None,
        "observables": ["f1", "f2", "f3"],
        "burn_in": 0.01,
        "initial": "random",
        "initial_amplitude": 0.9,
        "R": 10.0,
        "r": 0.5,
        "test_times": [],
        "t_max": 20.0,
        "n_times": 60,
        "p": "inf",
        "s": 0.0,
        "sigmas": [0.25, 0.5, 1.0, 1.5],
        "n_samples": 100000,
        "n_sigma": None,
    },
}

SUBCOMMANDS = ("simulate", "couple", "mix", "moments", "gamma", "irreducibility", "strichartz",
               "dispersive", "verify", "oracle")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(errors))
        self.errors = errors


@dataclass
class RunConfig:
    seed: int
    grid: dict
    model: dict
    noise: dict
    integrator: dict
    experiment: dict
    strict: bool = False
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("warnings")
        return d

    @property
    def kappa_auto(self) -> bool:
        return self.model["kappa"] == "auto"


def _merge(errors: list[str], defaults: dict, given: Any, where: str) -> dict:
    out = copy.deepcopy(defaults)
    if given is None:
        return out
    if not isinstance(given, dict):
        errors.append(f"{where}: expected a mapping, got {type(given).__name__}")
        return out
    for k, v in given.items():
        if k not in defaults:
            errors.append(f"{where}: unknown key {k!r}")
        else:
            out[k] = v
    return out


def _num(errors, where, value, cond, what, integer=False):
    ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    if integer:
        ok = ok and float(value).is_integer()
    if not ok or not cond(value):
        errors.append(f"{where}: {what}, got {value!r}")
        return False
    return True


def config_from_dict(raw: Optional[dict], strict: bool = False) -> RunConfig:
    errors: list[str] = []
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(["top level: expected a mapping"])
    for k in raw:
        if k not in DEFAULTS:
            errors.append(f"top level: unknown key {k!r}")
    blocks = {name: _merge(errors, DEFAULTS[name], raw.get(name), name)
              for name in ("grid", "model", "noise", "integrator", "experiment")}
    seed = raw.get("seed", DEFAULTS["seed"])
    _num(errors, "seed", seed, lambda v: v >= 0, "must be a non-negative integer", integer=True)

    g, m, n, it, ex = (blocks[k] for k in ("grid", "model", "noise", "integrator", "experiment"))
    _num(errors, "grid.dim", g["dim"], lambda v: v in (1, 2, 3), "must be 1, 2 or 3", True)
    _num(errors, "grid.n_per_dim", g["n_per_dim"], lambda v: v >= 4 and int(v) % 2 == 0,
         "must be an even integer >= 4", True)
    _num(errors, "grid.box_length", g["box_length"], lambda v: v > 0, "must be positive")

    _num(errors, "model.lambda", m["lambda"], lambda v: v >= 0, "must be >= 0")
    _num(errors, "model.alpha", m["alpha"], lambda v: v in (-1, 1), "must be -1 or +1", True)
    _num(errors, "model.sigma", m["sigma"], lambda v: v >= 0, "must be >= 0")
    if m["kappa"] != "auto" and m["kappa"] is not None:
        _num(errors, "model.kappa", m["kappa"], lambda v: v > 0, "must be positive or 'auto'")
    soft: list[str] = []
    if all(isinstance(m[k], (int, float)) for k in ("alpha", "sigma")) and isinstance(g["dim"], int):
        hard, soft = regime_violations(m["alpha"], m["sigma"], g["dim"])
        errors.extend(f"model: {e}" for e in hard)
        if strict:
            errors.extend(f"model (strict): {w}" for w in soft)

    _num(errors, "noise.amplitude", n["amplitude"], lambda v: v >= 0, "must be >= 0")
    _num(errors, "noise.decay", n["decay"], lambda v: v > 0, "must be positive")
    if n["cutoff"] is not None:
        _num(errors, "noise.cutoff", n["cutoff"], lambda v: v >= 0, "must be >= 0 or null")
    if n["noise_kind"] not in ("circular", "real"):
        errors.append(f"noise.noise_kind: must be 'circular' or 'real', got {n['noise_kind']!r}")

    _num(errors, "integrator.dt", it["dt"], lambda v: v > 0, "must be positive")
    _num(errors, "integrator.padding_factor", it["padding_factor"], lambda v: 1 <= v <= 4,
         "must lie in [1, 4]")
    _num(errors, "integrator.stride", it["stride"], lambda v: v >= 1, "must be an integer >= 1", True)
    _num(errors, "integrator.blowup_ceiling", it["blowup_ceiling"], lambda v: v > 0,
         "must be positive")

    _num(errors, "experiment.horizon", ex["horizon"], lambda v: v >= 0, "must be >= 0")
    _num(errors, "experiment.n_paths", ex["n_paths"], lambda v: v >= 1, "must be an integer >= 1", True)
    for k in ("theta", "beta", "block_length", "c1n", "R", "r", "t_max", "initial_amplitude"):
        _num(errors, f"experiment.{k}", ex[k], lambda v: v > 0, "must be positive")
    _num(errors, "experiment.moment_index", ex["moment_index"], lambda v: v in (1, 2, 3),
         "must be 1, 2 or 3", True)
    _num(errors, "experiment.n_times", ex["n_times"], lambda v: v >= 2, "must be an integer >= 2", True)
    _num(errors, "experiment.n_samples", ex["n_samples"], lambda v: v >= 1, "must be an integer >= 1", True)
    _num(errors, "experiment.burn_in", ex["burn_in"], lambda v: v >= 0, "must be >= 0")
    _num(errors, "experiment.s", ex["s"], lambda v: math.isfinite(v), "must be finite")
    if ex["slope_constant"] is not None:
        _num(errors, "experiment.slope_constant", ex["slope_constant"], lambda v: v > 0,
             "must be positive or null")
    if ex["n_sigma"] is not None:
        _num(errors, "experiment.n_sigma", ex["n_sigma"], lambda v: v >= 1, "must be an integer >= 1", True)
    if ex["p"] != "inf":
        _num(errors, "experiment.p", ex["p"], lambda v: v >= 2, "must be >= 2 or 'inf'")
    if ex["initial"] not in ("zero", "bump", "random"):
        errors.append(f"experiment.initial: must be zero, bump or random, got {ex['initial']!r}")
    obs = ex["observables"]
    if not isinstance(obs, list) or not obs or any(o not in ("f1", "f2", "f3") for o in obs):
        errors.append(f"experiment.observables: must be a non-empty list drawn from f1, f2, f3, got {obs!r}")
    for k in ("sigmas", "test_times"):
        v = ex[k]
        if not isinstance(v, list) or any(not isinstance(x, (int, float)) or x < 0 for x in v):
            errors.append(f"experiment.{k}: must be a list of non-negative numbers, got {v!r}")
    if (isinstance(it["dt"], (int, float)) and it["dt"] > 0
            and isinstance(ex["block_length"], (int, float)) and ex["block_length"] > 0):
        ratio = ex["block_length"] / it["dt"]
        if abs(ratio - round(ratio)) > 1e-9 * max(1.0, ratio):
            errors.append("experiment.block_length: must be a multiple of integrator.dt")

    if errors:
        raise ConfigError(errors)
    for w in soft:
        warnings.warn(w, RegimeWarning, stacklevel=2)
    return RunConfig(int(seed), g, m, n, it, ex, strict, soft)


def load_config(path: str | Path | None, strict: bool = False) -> RunConfig:
    """Read and validate a YAML config; ``None`` gives the shipped defaults."""
    if path is None:
        return config_from_dict({}, strict)
    p = Path(path)
    if not p.is_file():
        raise ConfigError([f"config file not found: {p}"])
    try:
        raw = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError([f"cannot parse {p}: {exc}"]) from exc
    return config_from_dict(raw, strict)
