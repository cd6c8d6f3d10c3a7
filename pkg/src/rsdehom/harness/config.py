"""Experiment configuration (YAML, schema version 1).

Keys
----
name            label used for output files
kind            corrector | effective | ipm | ergodic | clt
field           field spec path (relative to the config file) or ``bundled:<name>``
cutoff          Galerkin cutoff (max |k_j|)
eps             list of scales
T               horizon
c               step policy dt = c eps^2 (ignored when ``dt`` is set)
dt              fixed step override
paths           paths per ensemble
limit_paths     paths in the homogenized-limit ensemble (clt)
limit_dt        step of the limit simulator (clt)
seed            master seed
output          output directory (default: $RSDEHOM_OUTPUT or ./rsdehom-out, then /<name>)
workers         worker processes for path simulation
tol             CG / minimizer tolerance
route_tol       allowed disagreement between effective-coefficient routes
bound_tol       slack for the matrix-order bounds
lambdas         resolvent ladder (corrector)
refine_band     allowed change of zeta when the cutoff doubles (corrector)
A               slope of the confining potential (ipm)
t_list          snapshot times (ipm)
boundary_normalization  list drawn from {as-stated, occupation} (ipm)
start           origin | stationary (clt, ergodic)
volume_modes    wavevectors k of cos(2 pi k.w) volume observables (ergodic)
boundary_modes  wavevectors of boundary observables (ergodic)
grid_n          torus quadrature resolution
expected        optional analytic targets: {A: matrix, Gamma: vector, atol: float}
ks_floor        KS p-value floor (clt)
z_limit         |z| allowed for the final CLT comparison (clt)
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field as dc_field, fields
from importlib import resources
from pathlib import Path

import yaml

from ..errors import ConfigInvalid

SCHEMA = 1
KINDS = ("corrector", "effective", "ipm", "ergodic", "clt")
OUTPUT_ENV = "RSDEHOM_OUTPUT"


@dataclass
class ExperimentConfig:
    name: str
    kind: str
    field: str
    cutoff: int = 32
    eps: list = dc_field(default_factory=lambda: [0.2])
    T: float = 1.0
    c: float = 0.1
    dt: float | None = None
    paths: int = 1000
    limit_paths: int = 10_000
    limit_dt: float = 1e-3
    seed: int = 0
    output: str | None = None
    workers: int = 1
    tol: float = 1e-10
    route_tol: float = 1e-8
    bound_tol: float = 1e-8
    lambdas: list = dc_field(default_factory=lambda: [1.0, 0.25, 0.0625, 0.015625])
    refine_band: float = 1e-6
    A: float = 1.0
    t_list: list = dc_field(default_factory=lambda: [0.25, 0.5, 1.0])
    boundary_normalization: list = dc_field(default_factory=lambda: ["as-stated", "occupation"])
    start: str = "origin"
    volume_modes: list = dc_field(default_factory=lambda: [[1, 0]])
    boundary_modes: list = dc_field(default_factory=lambda: [[0, 1]])
    grid_n: int = 32
    expected: dict | None = None
    ks_floor: float = 0.01
    z_limit: float = 4.0
    schema: int = SCHEMA
    source: str | None = dc_field(default=None, compare=False)

    def validate(self) -> None:
        if self.schema != SCHEMA:
            raise ConfigInvalid(f"unsupported schema version {self.schema}")
        if self.kind not in KINDS:
            raise ConfigInvalid(f"kind must be one of {KINDS}, got {self.kind!r}")
        if not self.name:
            raise ConfigInvalid("name is required")
        if not self.eps or any(not float(e) > 0 for e in self.eps):
            raise ConfigInvalid("eps must be a non-empty list of positive numbers")
        checks = [
            (self.cutoff >= 1, "cutoff must be >= 1"),
            (self.T > 0, "T must be positive"),
            (self.c > 0, "c must be positive"),
            (self.dt is None or self.dt > 0, "dt must be positive"),
            (self.paths >= 2, "paths must be >= 2"),
            (self.limit_paths >= 2, "limit_paths must be >= 2"),
            (self.limit_dt > 0, "limit_dt must be positive"),
            (self.seed >= 0, "seed must be non-negative"),
            (self.workers >= 1, "workers must be >= 1"),
            (self.tol > 0 and self.route_tol > 0, "tolerances must be positive"),
            (self.A > 0, "A must be positive"),
            (len(self.t_list) > 0 and all(t > 0 for t in self.t_list), "t_list must hold positive times"),
            (self.start in ("origin", "stationary"), "start must be origin or stationary"),
            (self.grid_n >= 2, "grid_n must be >= 2"),
            (0 < self.ks_floor < 1, "ks_floor must lie in (0, 1)"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigInvalid(msg)
        lams = [float(v) for v in self.lambdas]
        if len(lams) < 2 or any(b >= a for a, b in zip(lams, lams[1:])) or lams[-1] <= 0:
            raise ConfigInvalid("lambdas must be strictly decreasing positive values")
        for b in self.boundary_normalization:
            if b not in ("as-stated", "occupation"):
                raise ConfigInvalid(f"unknown boundary normalization {b!r}")

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("source")
        return out

    @classmethod
    def from_dict(cls, data: dict, source: str | None = None) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigInvalid("config must be a mapping")
        known = {f.name for f in fields(cls)} - {"source"}
        unknown = set(data) - known
        if unknown:
            raise ConfigInvalid(f"unknown config keys: {sorted(unknown)}")
        for key in ("name", "kind", "field"):
            if key not in data:
                raise ConfigInvalid(f"missing required key {key!r}")
        try:
            cfg = cls(**data, source=source)
            cfg.eps = [float(e) for e in cfg.eps]
            cfg.T = float(cfg.T)
            cfg.c = float(cfg.c)
            cfg.dt = None if cfg.dt is None else float(cfg.dt)
            cfg.tol = float(cfg.tol)
            cfg.route_tol = float(cfg.route_tol)
            cfg.bound_tol = float(cfg.bound_tol)
            cfg.cutoff = int(cfg.cutoff)
            cfg.paths = int(cfg.paths)
            cfg.limit_paths = int(cfg.limit_paths)
            cfg.seed = int(cfg.seed)
            cfg.workers = int(cfg.workers)
            cfg.t_list = [float(t) for t in cfg.t_list]
            cfg.lambdas = [float(v) for v in cfg.lambdas]
        except (TypeError, ValueError) as exc:
            raise ConfigInvalid(str(exc)) from exc
        cfg.validate()
        return cfg

    def field_path(self) -> Path:
        if self.field.startswith("bundled:"):
            return bundled_path("fields", self.field.split(":", 1)[1] + ".yaml")
        p = Path(self.field)
        if not p.is_absolute() and self.source is not None:
            p = Path(self.source).parent / p
        return p

    def output_dir(self) -> Path:
        if self.output:
            return Path(self.output)
        return Path(os.environ.get(OUTPUT_ENV, "rsdehom-out")) / self.name


def bundled_path(kind: str, name: str) -> Path:
    return Path(str(resources.files("rsdehom") / "data" / kind / name))


def bundled_configs() -> list[Path]:
    root = Path(str(resources.files("rsdehom") / "data" / "configs"))
    return sorted(root.glob("*.yaml"))


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"malformed YAML in {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigInvalid("config must be a mapping")
    data.update({k: v for k, v in overrides.items() if v is not None})
    return ExperimentConfig.from_dict(data, source=str(path))
