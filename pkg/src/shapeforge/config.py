"""Plain-text run configuration: one ``section.key = value`` per line.

Comments start with ``#``. Lists are comma separated, ``none`` clears an
optional value. Unknown sections or keys are errors.
"""
from __future__ import annotations

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .descent import DescentMetric
from .fem import SolverSettings
from .geometry import GeometryError, MachineModel, MachineSpec, generate
from .physics import NU0, BrauerIron, LinearIron, Reluctivity

__all__ = [
    "ConfigError",
    "MaterialConfig",
    "DescentConfig",
    "ParetoConfig",
    "OutputConfig",
    "ValidateConfig",
    "Config",
    "parse_config",
    "load_config",
    "serialize_config",
    "build_problem",
]


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class MaterialConfig:
    kind: str = "brauer"
    k1: float = 49.4
    k2: float = 1.46
    k3: float = 520.6
    relative_permeability: float = 5100.0
    s_max: float = 2.5

    def reluctivity(self) -> Reluctivity:
        iron = (BrauerIron(self.k1, self.k2, self.k3) if self.kind == "brauer"
                else LinearIron(NU0 / self.relative_permeability))
        return Reluctivity(iron, NU0, self.s_max)


@dataclass(frozen=True)
class DescentConfig:
    metric: str = "h1"
    mass_coefficient: float = 0.01
    lame_lambda: float = 1.0
    lame_mu: float = 1.0
    boundary: str = "slip"
    tol: float = 1e-8
    max_iter: int = 70
    min_quality_ratio: float = 0.2
    move_buffer: bool = True


@dataclass(frozen=True)
class ParetoConfig:
    weights: tuple[float, ...] = (0.065, 0.035, 0.005)
    volume_scale: float = 1e6


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "out"
    snapshot_every: int = 10


@dataclass(frozen=True)
class ValidateConfig:
    torque_rtol: float = 1e-3
    volume_rtol: float = 1e-6
    amplitude: float = 1e-3
    steps: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
    newton_tol: float = 1e-12


# excitation keys live on MachineSpec
_EXCITATION = {"phase_currents": "phase_currents", "turns": "turns_per_slot",
               "current_angle": "current_angle", "rotor_angle": "rotor_angle"}


@dataclass(frozen=True)
class Config:
    machine: MachineSpec = field(default_factory=MachineSpec)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    solver: SolverSettings = field(default_factory=SolverSettings)
    descent: DescentConfig = field(default_factory=DescentConfig)
    pareto: ParetoConfig = field(default_factory=ParetoConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    validate: ValidateConfig = field(default_factory=ValidateConfig)

    def check(self) -> None:
        """Range checks; raises ConfigError naming the offending field."""
        try:
            self.machine.validate()
        except GeometryError as exc:
            raise ConfigError(f"machine: {exc}") from exc
        m, s, d, p, o, v = self.material, self.solver, self.descent, self.pareto, self.output, self.validate
        rules = [
            (m.kind in ("brauer", "linear"), "material.kind must be brauer or linear"),
            (min(m.k1, m.k2, m.k3) > 0, "material.k1, k2, k3 must be positive"),
            (m.relative_permeability >= 1, "material.relative_permeability must be >= 1"),
            (m.s_max > 0, "material.s_max must be positive"),
            (s.newton_tol > 0 and s.linear_rtol > 0, "solver tolerances must be positive"),
            (s.newton_max_iter >= 1, "solver.newton_max_iter must be >= 1"),
            (s.linear_method in ("direct", "cg", "dense"), "solver.linear_method must be direct, cg or dense"),
            (d.metric in ("h1", "elasticity"), "descent.metric must be h1 or elasticity"),
            (d.boundary in ("slip", "clamped"), "descent.boundary must be slip or clamped"),
            (d.mass_coefficient >= 0, "descent.mass_coefficient must be >= 0"),
            (d.lame_mu > 0 and d.lame_lambda >= 0, "descent Lame parameters out of range"),
            (d.tol > 0, "descent.tol must be positive"),
            (d.max_iter >= 0, "descent.max_iter must be >= 0"),
            (0 <= d.min_quality_ratio < 1, "descent.min_quality_ratio must be in [0, 1)"),
            (len(p.weights) >= 1 and all(w > 0 for w in p.weights), "pareto.weights must be positive"),
            (p.volume_scale > 0, "pareto.volume_scale must be positive"),
            (bool(o.directory), "output.directory must not be empty"),
            (o.snapshot_every >= 0, "output.snapshot_every must be >= 0"),
            (v.torque_rtol > 0 and v.volume_rtol > 0, "validate thresholds must be positive"),
            (v.amplitude > 0 and len(v.steps) >= 1 and all(t > 0 for t in v.steps),
             "validate.amplitude and validate.steps must be positive"),
        ]
        for ok, msg in rules:
            if not ok:
                raise ConfigError(msg)

    def metric(self) -> DescentMetric:
        d = self.descent
        return DescentMetric(d.metric, d.mass_coefficient, d.lame_lambda, d.lame_mu, d.boundary,
                             (self.machine.rotor_outer_radius, self.machine.shaft_radius))


_SECTIONS = ("machine", "excitation", "material", "solver", "descent", "pareto", "output", "validate")


def _target(section: str, key: str):
    """(config attribute, field name) for a section/key pair, or None."""
    if section == "excitation":
        return ("machine", _EXCITATION[key]) if key in _EXCITATION else None
    if section == "machine" and key in _EXCITATION.values():
        return None
    if section not in _SECTIONS:
        return None
    cls = type(getattr(Config(), section))
    names = {f.name for f in dataclasses.fields(cls)}
    return (section, key) if key in names else None


def _field_type(attr: str, name: str):
    cls = type(getattr(Config(), attr))
    return typing.get_type_hints(cls)[name]


def _convert(text: str, typ):
    origin = typing.get_origin(typ)
    args = typing.get_args(typ)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() == "none":
            return None
        return _convert(text, next(a for a in args if a is not type(None)))
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        inner = args[0] if args else float
        if args and Ellipsis not in args and len(items) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {len(items)}")
        return tuple(_convert(t, inner) for t in items)
    if typ is bool:
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        value = float(text)
        if math.isnan(value):
            raise ValueError("NaN is not allowed")
        return value
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str, check: bool = True) -> Config:
    updates: dict[str, dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'section.key = value', got {raw.strip()!r}", lineno)
        lhs, value = (s.strip() for s in line.split("=", 1))
        if "." not in lhs:
            raise ConfigError(f"key {lhs!r} needs a section prefix", lineno)
        section, key = lhs.split(".", 1)
        target = _target(section, key)
        if target is None:
            raise ConfigError(f"unknown key {lhs!r}", lineno)
        attr, name = target
        try:
            converted = _convert(value, _field_type(attr, name))
        except ValueError as exc:
            raise ConfigError(f"bad value for {lhs}: {exc}", lineno) from exc
        if name in updates.setdefault(attr, {}):
            raise ConfigError(f"duplicate key {lhs!r}", lineno)
        updates[attr][name] = converted
    base = Config()
    cfg = dataclasses.replace(base, **{
        attr: dataclasses.replace(getattr(base, attr), **vals) for attr, vals in updates.items()})
    if check:
        cfg.check()
    return cfg


def load_config(path: str | Path | None) -> Config:
    if path is None:
        return parse_config("")
    return parse_config(Path(path).read_text())


def serialize_config(cfg: Config) -> str:
    lines = []
    inverse = {v: k for k, v in _EXCITATION.items()}
    for section in _SECTIONS:
        attr = "machine" if section == "excitation" else section
        obj = getattr(cfg, attr)
        for f in dataclasses.fields(obj):
            if (section == "excitation") != (attr == "machine" and f.name in inverse):
                continue
            key = inverse.get(f.name, f.name) if section == "excitation" else f.name
            lines.append(f"{section}.{key} = {_format(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def build_problem(cfg: Config, model: MachineModel | None = None):
    """Generate the machine (unless given) and bundle it with the run settings."""
    from .optimizer import ShapeProblem

    model = generate(cfg.machine) if model is None else model
    problem = ShapeProblem(model.mesh, model.regions, model.excitation, model.torque,
                           cfg.material.reluctivity(), cfg.metric(), cfg.solver,
                           cfg.pareto.volume_scale, cfg.descent.min_quality_ratio,
                           cfg.descent.move_buffer)
    return model, problem
