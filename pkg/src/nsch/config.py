"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Sections and keys (defaults in brackets)::

    [grid]        nx [64]  ny [64]  Lx [1.0]  Ly [1.0]  bc [periodic]
    [params]      p [2]  nu1 [1]  nu2 [1]  rho1 [1]  rho2 [1]  eps0 [1]  m [1]
                  alpha [1]  eps_mollifier [0]  blend_width [0.1]
    [time]        dt [1e-3]  T [0.01]  snapshot_every [0]  checkpoint_every [0]
    [run]         scenario [spinodal]  seed [0]  amplitude [0.05]
                  velocity_amplitude [0]  convection_form [conservative]
                  splitting [convex_split]  output_dir []
    [tolerances]  newton_tol [1e-10]  picard_tol [1e-8]  max_picard_iter [50]
                  elliptic_method [direct]  elliptic_rel_tol [1e-10]

``#`` starts a comment.  ``snapshot_every = 0`` writes only the initial and
final snapshots; ``checkpoint_every = 0`` disables checkpoints.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .constitutive import FluidParams
from .grid import EllipticSolverConfig, Grid

SCENARIOS = ("spinodal", "shear", "drop", "rest")


class ConfigError(ValueError):
    pass


def _int(s):
    v = float(s)
    if v != int(v):
        raise ValueError(f"expected an integer, got {s!r}")
    return int(v)


_SCHEMA = {
    "grid": {"nx": (_int, 64), "ny": (_int, 64), "Lx": (float, 1.0), "Ly": (float, 1.0), "bc": (str, "periodic")},
    "params": {
        "p": (float, 2.0), "nu1": (float, 1.0), "nu2": (float, 1.0), "rho1": (float, 1.0), "rho2": (float, 1.0),
        "eps0": (float, 1.0), "m": (float, 1.0), "alpha": (float, 1.0), "eps_mollifier": (float, 0.0),
        "blend_width": (float, 0.1),
    },
    "time": {"dt": (float, 1e-3), "T": (float, 0.01), "snapshot_every": (_int, 0), "checkpoint_every": (_int, 0)},
    "run": {
        "scenario": (str, "spinodal"), "seed": (_int, 0), "amplitude": (float, 0.05),
        "velocity_amplitude": (float, 0.0), "convection_form": (str, "conservative"),
        "splitting": (str, "convex_split"), "output_dir": (str, ""),
    },
    "tolerances": {
        "newton_tol": (float, 1e-10), "picard_tol": (float, 1e-8), "max_picard_iter": (_int, 50),
        "elliptic_method": (str, "direct"), "elliptic_rel_tol": (float, 1e-10),
    },
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in _SCHEMA.items()}
        for sec, kv in self.values.items():
            full[sec].update(kv)
        self.values = full

    def __getitem__(self, key):
        sec, name = key.split(".")
        return self.values[sec][name]

    def replace(self, **updates):
        """Copy with ``section__key=value`` overrides, e.g. ``time__dt=5e-4``."""
        vals = {s: dict(kv) for s, kv in self.values.items()}
        for k, v in updates.items():
            sec, name = k.split("__")
            if name not in _SCHEMA.get(sec, {}):
                raise ConfigError(f"unknown key {sec}.{name}")
            vals[sec][name] = v
        out = RunConfig(vals)
        out.validate()
        return out

    # -- derived objects ----------------------------------------------------
    @property
    def grid(self) -> Grid:
        g = self.values["grid"]
        return Grid(g["nx"], g["ny"], g["Lx"], g["Ly"], g["bc"])

    @property
    def params(self) -> FluidParams:
        p = self.values["params"]
        return FluidParams(p=p["p"], nu1=p["nu1"], nu2=p["nu2"], rho1_tilde=p["rho1"], rho2_tilde=p["rho2"],
                           eps0=p["eps0"], m=p["m"], alpha=p["alpha"], blend_width=p["blend_width"])

    @property
    def elliptic(self) -> EllipticSolverConfig:
        t = self.values["tolerances"]
        return EllipticSolverConfig(method=t["elliptic_method"], rel_tol=t["elliptic_rel_tol"])

    @property
    def nsteps(self):
        return int(round(self["time.T"] / self["time.dt"]))

    def validate(self):
        try:
            self.grid
            self.params
            self.elliptic
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        t = self.values["time"]
        if not t["dt"] > 0:
            raise ConfigError("time.dt must be positive")
        if t["T"] < 0:
            raise ConfigError("time.T must be >= 0")
        if abs(self.nsteps * t["dt"] - t["T"]) > 1e-9 * max(t["T"], t["dt"]):
            raise ConfigError("time.T must be an integer multiple of time.dt")
        for k in ("snapshot_every", "checkpoint_every"):
            if t[k] < 0:
                raise ConfigError(f"time.{k} must be >= 0")
        if self["params.eps_mollifier"] < 0:
            raise ConfigError("params.eps_mollifier must be >= 0")
        r = self.values["run"]
        if r["scenario"] not in SCENARIOS:
            raise ConfigError(f"run.scenario must be one of {SCENARIOS}")
        if r["convection_form"] not in ("advective", "conservative"):
            raise ConfigError("run.convection_form must be advective or conservative")
        if r["splitting"] not in ("convex_split", "fully_implicit"):
            raise ConfigError("run.splitting must be convex_split or fully_implicit")
        if r["scenario"] == "drop" and self["grid.bc"] != "physical":
            raise ConfigError("scenario drop needs grid.bc = physical")
        tol = self.values["tolerances"]
        if not (tol["newton_tol"] > 0 and tol["picard_tol"] > 0 and tol["max_picard_iter"] > 0):
            raise ConfigError("tolerances must be positive")
        return self

    # -- text form ----------------------------------------------------------
    def serialize(self) -> str:
        lines = []
        for sec, keys in _SCHEMA.items():
            lines.append(f"[{sec}]")
            for k in keys:
                v = self.values[sec][k]
                lines.append(f"{k} = {v!r}" if isinstance(v, float) else f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def parse_config_text(text, source="<string>") -> RunConfig:
    values = {}
    seen = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{source}:{lineno}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in _SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            values.setdefault(section, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside of any section")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in _SCHEMA[section]:
            raise ConfigError(f"{source}:{lineno}: unknown key {section}.{key}")
        full = f"{section}.{key}"
        if full in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {full} (first defined on line {seen[full]})")
        seen[full] = lineno
        conv = _SCHEMA[section][key][0]
        try:
            values[section][key] = conv(val)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {full}: {val!r}") from None
    return RunConfig(values).validate()


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


PRESETS = {
    "smoke": """
[grid]
nx = 32
ny = 32
Lx = 32.0
Ly = 32.0
[time]
dt = 1e-3
T = 0.01
[run]
scenario = spinodal
seed = 1
""",
    "spinodal_64": """
[grid]
nx = 64
ny = 64
Lx = 64.0
Ly = 64.0
bc = periodic
[params]
p = 2
eps_mollifier = 1.0
[time]
dt = 1e-3
T = 1.0
snapshot_every = 250
[run]
scenario = spinodal
seed = 7
amplitude = 0.05
""",
    "shear_powerlaw": """
[grid]
nx = 64
ny = 64
Lx = 1.0
Ly = 1.0
bc = periodic
[params]
p = 3
nu1 = 0.5
nu2 = 1.0
eps0 = 0.02
m = 1e-3
eps_mollifier = 1e-4
[time]
dt = 1e-3
T = 0.3
snapshot_every = 100
[run]
scenario = shear
velocity_amplitude = 1.0
""",
    "density_contrast": """
[grid]
nx = 48
ny = 48
Lx = 1.0
Ly = 1.0
bc = physical
[params]
p = 2
nu1 = 0.1
nu2 = 0.1
rho1 = 1.0
rho2 = 3.0
eps0 = 0.03
m = 1e-3
eps_mollifier = 1e-4
[time]
dt = 2e-3
T = 0.2
snapshot_every = 25
[run]
scenario = drop
amplitude = 0.9
velocity_amplitude = 1.0
""",
}


def preset(name) -> RunConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return parse_config_text(PRESETS[name], f"<preset {name}>")


def as_dict(cfg: RunConfig):
    return dataclasses.asdict(cfg)["values"]
