"""Experiment configuration: a JSON document with nested sections.

Every field has a default, so an empty document is a valid config. Unknown
keys are rejected so that typos do not silently fall back to defaults.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field

from .galerkin import GALERKIN_SYSTEMS
from .ito_wentzell import WENTZELL_SPECS
from .model import available_problems

INVERSE_METHODS = ("grid", "sipde", "backward")
FORMATS = ("csv", "json")

DEFAULTS = {
    "problem": {"name": "linear-jump-diffusion", "params": {}},
    "grid": {"steps": 512, "horizon": None},
    "paths": 500,
    "seed": 0,
    "x0": 1.0,
    # initial points of the flow family that the BSDE is solved over
    "mesh": {"lo": 0.25, "hi": 3.0, "points": 12},
    # spatial points where inverse and composed fields are reported
    "query_mesh": {"lo": 0.5, "hi": 1.5, "points": 17},
    # finite-difference mesh of the SIPDE inverse; must cover the flow's range
    "sipde_mesh": {"lo": 0.0, "hi": 4.0, "points": 33},
    "inverse": {"method": "grid", "band": 2},
    "regression": {"degree": 3, "ridge": 1e-10, "sweeps": 3, "theta": 0.5},
    "batches": 8,
    "levels": 3,
    "galerkin": {"system": "scalar-jump", "params": {}, "lam": None, "alpha": None},
    "wentzell": {"specs": sorted(WENTZELL_SPECS)},
    "tolerances": {
        "identity": 1e-3,
        "order": 0.45,
        "sigmas": 3.0,
        "floor": 1e-3,
        "exact": 1e-12,
        "flow": 1e-10,
        "rejection": 10.0,
    },
    "output": {"dir": "bsipde-out", "format": "csv", "table_paths": 4},
    "workers": 1,
    "chunk": 32,
}


class ConfigError(ValueError):
    """Schema violation; the message names the offending field."""


def _merge(base: dict, over: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        name = prefix + k
        if k not in base:
            raise ConfigError(f"{name}: unknown field")
        if isinstance(base[k], dict) and k != "params":
            if not isinstance(v, dict):
                raise ConfigError(f"{name}: expected an object")
            out[k] = _merge(base[k], v, name + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def _int(d: dict, key: str, name: str, lo: int = 1) -> int:
    v = d[key]
    if isinstance(v, bool) or not isinstance(v, int) or v < lo:
        raise ConfigError(f"{name}: must be an integer >= {lo}, got {v!r}")
    return v


def _num(d: dict, key: str, name: str, positive: bool = False, allow_none: bool = False) -> float | None:
    v = d[key]
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or v != v:
        raise ConfigError(f"{name}: must be a number, got {v!r}")
    if positive and v <= 0:
        raise ConfigError(f"{name}: must be positive, got {v!r}")
    return float(v)


def _choice(v, options, name):
    if v not in options:
        raise ConfigError(f"{name}: must be one of {', '.join(options)}, got {v!r}")
    return v


@dataclass
class MeshSpec:
    lo: float
    hi: float
    points: int

    def values(self):
        import numpy as np

        return np.linspace(self.lo, self.hi, self.points)


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.validate()

    # ------------------------------------------------------------ access

    def __getitem__(self, key):
        return self.raw[key]

    @property
    def problem(self) -> str:
        return self.raw["problem"]["name"]

    @property
    def params(self) -> dict:
        return dict(self.raw["problem"]["params"])

    @property
    def steps(self) -> int:
        return self.raw["grid"]["steps"]

    @property
    def horizon(self) -> float | None:
        return self.raw["grid"]["horizon"]

    @property
    def paths(self) -> int:
        return self.raw["paths"]

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def levels(self) -> int:
        return self.raw["levels"]

    @property
    def workers(self) -> int:
        return self.raw["workers"]

    @property
    def chunk(self) -> int:
        return self.raw["chunk"]

    @property
    def tol(self) -> dict:
        return self.raw["tolerances"]

    @property
    def out_dir(self) -> str:
        return self.raw["output"]["dir"]

    @property
    def format(self) -> str:
        return self.raw["output"]["format"]

    def mesh(self, key: str) -> MeshSpec:
        m = self.raw[key]
        return MeshSpec(float(m["lo"]), float(m["hi"]), int(m["points"]))

    # ------------------------------------------------------------ checks

    def validate(self) -> None:
        r = self.raw
        if not isinstance(r["problem"]["name"], str):
            raise ConfigError("problem.name: must be a string")
        _choice(r["problem"]["name"], available_problems(), "problem.name")
        if not isinstance(r["problem"]["params"], dict):
            raise ConfigError("problem.params: expected an object")
        for k, v in r["problem"]["params"].items():
            if not isinstance(v, (int, float, list, str)) or isinstance(v, bool):
                raise ConfigError(f"problem.params.{k}: must be a number, list or name, got {v!r}")
        steps = _int(r["grid"], "steps", "grid.steps")
        _num(r["grid"], "horizon", "grid.horizon", positive=True, allow_none=True)
        _int(r, "paths", "paths")
        _int(r, "seed", "seed", lo=0)
        _num(r, "x0", "x0")
        for key in ("mesh", "query_mesh", "sipde_mesh"):
            lo = _num(r[key], "lo", f"{key}.lo")
            hi = _num(r[key], "hi", f"{key}.hi")
            _int(r[key], "points", f"{key}.points", lo=2)
            if not hi > lo:
                raise ConfigError(f"{key}.hi: must exceed {key}.lo")
        _choice(r["inverse"]["method"], INVERSE_METHODS, "inverse.method")
        _int(r["inverse"], "band", "inverse.band", lo=0)
        _int(r["regression"], "degree", "regression.degree", lo=0)
        _num(r["regression"], "ridge", "regression.ridge")
        if r["regression"]["ridge"] < 0:
            raise ConfigError("regression.ridge: must be >= 0")
        _int(r["regression"], "sweeps", "regression.sweeps")
        theta = _num(r["regression"], "theta", "regression.theta")
        if not 0.0 <= theta <= 1.0:
            raise ConfigError("regression.theta: must lie in [0, 1]")
        batches = _int(r, "batches", "batches")
        if batches == 1 or batches > r["paths"]:
            raise ConfigError(f"batches: need 2 <= batches <= paths, got {batches}")
        levels = _int(r, "levels", "levels")
        if levels < 2:
            raise ConfigError("levels: a refinement study needs at least 2 levels")
        if steps % (2 ** (levels - 1)):
            raise ConfigError(f"grid.steps: {steps} is not divisible by 2^(levels-1) = {2 ** (levels - 1)}")
        _choice(r["galerkin"]["system"], GALERKIN_SYSTEMS, "galerkin.system")
        _num(r["galerkin"], "lam", "galerkin.lam", allow_none=True)
        _num(r["galerkin"], "alpha", "galerkin.alpha", allow_none=True)
        specs = r["wentzell"]["specs"]
        if not isinstance(specs, list) or not specs:
            raise ConfigError("wentzell.specs: expected a nonempty list")
        for s in specs:
            _choice(s, sorted(WENTZELL_SPECS), "wentzell.specs")
        for k in r["tolerances"]:
            _num(r["tolerances"], k, f"tolerances.{k}", positive=k != "floor")
        _choice(r["output"]["format"], FORMATS, "output.format")
        if not isinstance(r["output"]["dir"], str) or not r["output"]["dir"]:
            raise ConfigError("output.dir: must be a nonempty string")
        _int(r["output"], "table_paths", "output.table_paths", lo=0)
        _int(r, "workers", "workers")
        _int(r, "chunk", "chunk")

    # ------------------------------------------------------------ io

    def to_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def override(self, **flags) -> "ExperimentConfig":
        """Copy with dotted-path overrides; None values are ignored."""
        raw = copy.deepcopy(self.raw)
        for path, v in flags.items():
            if v is None:
                continue
            keys = path.split(".")
            d = raw
            for k in keys[:-1]:
                d = d[k]
            d[keys[-1]] = v
        return ExperimentConfig(raw)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: top level must be an object")
    if "config_sha256" in data and isinstance(data.get("config"), dict):
        # a run manifest: replay its resolved config
        data = data["config"]
    return ExperimentConfig(_merge(DEFAULTS, data))


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return config_from_dict(data)


def load_config(path: str | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config(text, path)
