"""Run configurations: JSON files validated against a versioned schema.

A minimal configuration names a registry system and the problem kind::

    {"version": 1, "system": "byrnes", "kind": "OCP1"}

Everything else (``C``, ``z``, ``x0``, ``xf``, ``horizons``) defaults to the
registry entry and may be overridden.  A user-defined system replaces the
name by ``{"n": .., "m": .., "f": [..], "g": [[..]]}`` (see :mod:`.expr`).
Terminal components listed in ``terminal_free`` are numbered from 1 like the
state variables ``x1..xn``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import jsonschema
import numpy as np

from ..errors import ConfigError, ModelError
from ..model import OCP1, OCP2, OcpProblem
from ..shooting import ContinuationPlan
from .expr import SystemExpr
from .registry import RegistryEntry, lookup

SCHEMA_VERSION = 1
DEFAULT_GRID = 2001

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}
_MAT = {"type": "array", "items": _VEC, "minItems": 1}
_POS = {"type": "number", "exclusiveMinimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "turnpike run configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["version", "system", "kind"],
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "system": {
            "oneOf": [
                {"type": "string", "minLength": 1},
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["registry"],
                    "properties": {"registry": {"type": "string"}, "A": _MAT, "B": _MAT},
                },
                {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["n", "m", "f", "g"],
                    "properties": {
                        "name": {"type": "string"},
                        "n": {"type": "integer", "minimum": 1},
                        "m": {"type": "integer", "minimum": 1},
                        "f": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                        "g": {"type": "array", "minItems": 1,
                              "items": {"type": "array", "items": {"type": "string"},
                                        "minItems": 1}},
                    },
                },
            ]
        },
        "kind": {"enum": [OCP1, OCP2]},
        "C": _MAT,
        "z": _VEC,
        "x0": _VEC,
        "xf": _VEC,
        "terminal_free": {"type": "array", "items": {"type": "integer", "minimum": 1},
                          "uniqueItems": True},
        "horizons": {"type": "array", "items": _POS, "minItems": 1},
        "tolerances": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"rtol": _POS, "atol": _POS},
        },
        "grid": {"type": "integer", "minimum": 2},
        "continuation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "steps": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "minProperties": 1,
                        "properties": {"T": _POS, "x0": _VEC, "xf": _VEC, "z": _VEC},
                    },
                },
                "ramp": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["key", "start", "stop", "count"],
                    "properties": {
                        "key": {"enum": ["T", "x0", "xf", "z"]},
                        "start": {"oneOf": [_NUM, _VEC]},
                        "stop": {"oneOf": [_NUM, _VEC]},
                        "count": {"type": "integer", "minimum": 2},
                        "geometric": {"type": "boolean"},
                    },
                },
                "max_bisections": {"type": "integer", "minimum": 0},
            },
        },
        "sop": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "seeds": {"type": "array", "items": _VEC, "minItems": 1},
                "grid": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["lower", "upper", "points"],
                    "properties": {"lower": _VEC, "upper": _VEC,
                                   "points": {"type": "integer", "minimum": 1}},
                },
                "select": {"type": "integer", "minimum": 0},
            },
        },
        "portrait": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "window": {"type": "array", "items": _NUM, "minItems": 4, "maxItems": 4},
                "arc_budget": _POS,
                "orbit_seeds": {"type": "array", "items": _VEC},
            },
        },
        "epsilons": {"type": "array", "items": _POS, "minItems": 1},
        "svg": {"type": "boolean"},
        "output_dir": {"type": "string", "minLength": 1},
    },
    "allOf": [
        {
            "if": {"properties": {"kind": {"const": OCP1}}},
            "then": {"not": {"anyOf": [{"required": ["xf"]}, {"required": ["terminal_free"]}]}},
        },
        {
            "if": {"properties": {"kind": {"const": OCP2}}},
            "then": {"not": {"required": ["z"]}},
        },
    ],
}


@dataclass(frozen=True, eq=False)
class ProblemConfig:
    """A validated configuration: the problem plus run settings."""

    raw: dict
    problem: OcpProblem
    entry: Optional[RegistryEntry]
    system_expr: Optional[SystemExpr]
    rtol: float = 1e-10
    atol: float = 1e-12
    grid: int = DEFAULT_GRID
    terminal_free: tuple = ()
    plan: Optional[ContinuationPlan] = None
    sop_seeds: list = field(default_factory=list)
    select: Optional[int] = None
    epsilons: Optional[list] = None
    svg: bool = True
    output_dir: Optional[str] = None

    @property
    def kind(self):
        return self.problem.kind


def _validation_message(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    if err.validator == "not" and list(err.absolute_path) == [] and "kind" in err.instance:
        kind = err.instance["kind"]
        banned = {OCP1: ("xf", "terminal_free"), OCP2: ("z",)}[kind]
        present = [k for k in banned if k in err.instance]
        return f"{kind} problems do not take {', '.join(present)}"
    return f"{where}: {err.message}"


def validate_dict(data) -> None:
    """Schema check; raises ``ConfigError`` naming the first offending path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(data), key=lambda e: (len(e.path), e.path.__repr__()))
    if errors:
        raise ConfigError("invalid configuration: " + _validation_message(errors[0]))


def _seed_grid(lower, upper, points):
    lower = np.asarray(lower, float)
    upper = np.asarray(upper, float)
    if lower.shape != upper.shape:
        raise ConfigError("sop grid bounds must have equal length")
    axes = [np.linspace(a, b, points) for a, b in zip(lower, upper)]
    return [np.array(p) for p in np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T]


def default_seeds(problem: OcpProblem):
    """Origin, the data points, and a coarse grid around them.

    The grid covers the state box for ``n <= 3`` (costate seeded at zero)
    and the full ``(x, p)`` plane for scalar problems.
    """
    n = problem.n
    pts = [np.zeros(n), problem.x0]
    if problem.kind == OCP1 and problem.C.shape == (n, n):
        try:
            pts.append(np.linalg.solve(problem.C, problem.z))
        except np.linalg.LinAlgError:
            pass
    if problem.kind == OCP2:
        pts.append(problem.xf)
    r = 1.0 + max(float(np.abs(p).max()) for p in pts)
    if n == 1:
        # scalar problems: seed the whole (x, p) plane so that centers are found too
        pts += _seed_grid([-r, -r], [r, r], 9)
    elif n <= 3:
        pts += _seed_grid(-r * np.ones(n), r * np.ones(n), 5)
    return pts


def _build_plan(spec) -> Optional[ContinuationPlan]:
    if not spec:
        return None
    kw = {"max_bisections": spec["max_bisections"]} if "max_bisections" in spec else {}
    plan = ContinuationPlan(**kw)
    if "ramp" in spec:
        r = spec["ramp"]
        try:
            plan = plan + ContinuationPlan.ramp(r["key"], r["start"], r["stop"], r["count"],
                                                geometric=r.get("geometric", False), **kw)
        except ValueError as exc:
            raise ConfigError(f"continuation ramp: {exc}") from None
    if "steps" in spec:
        plan = plan + ContinuationPlan(tuple(spec["steps"]), **kw)
    return plan


def config_from_dict(data: dict) -> ProblemConfig:
    """Validate ``data`` and build the problem (no solves are performed)."""
    validate_dict(data)
    sysdef = data["system"]
    entry = expr = None
    overrides = {k: data[k] for k in ("C", "z", "x0", "xf", "horizons") if k in data}
    kind = data["kind"]
    try:
        if isinstance(sysdef, str) or "registry" in sysdef:
            name = sysdef if isinstance(sysdef, str) else sysdef["registry"]
            entry = lookup(name)
            if isinstance(sysdef, dict):
                if entry.name != "lqr" and ({"A", "B"} & set(sysdef)):
                    raise ConfigError(f"system {name!r} takes no A/B parameters")
                overrides.update({k: np.asarray(sysdef[k], float) for k in ("A", "B")
                                  if k in sysdef})
            if kind not in entry.defaults:
                raise ConfigError(f"system {name!r} has no {kind} problem")
            problem = entry.problem(kind, **overrides)
        else:
            expr = SystemExpr(sysdef["n"], sysdef["m"], sysdef["f"], sysdef["g"],
                              name=sysdef.get("name", "dsl"))
            missing = [k for k in ("x0", "horizons") + (("xf",) if kind == OCP2 else ())
                       if k not in data]
            if missing:
                raise ConfigError(f"user-defined systems need {', '.join(missing)}")
            overrides.setdefault("C", np.eye(expr.n))
            problem = OcpProblem(system=expr.to_system(), kind=kind, **overrides)
    except (ModelError, ValueError) as exc:
        raise ConfigError(f"invalid problem data: {exc}") from None
    if not problem.horizons:
        raise ConfigError("no horizons given")
    free = tuple(i - 1 for i in data.get("terminal_free", ()))
    if any(i >= problem.n for i in free):
        raise ConfigError(f"terminal_free entries must lie in 1..{problem.n}")
    sop = data.get("sop", {})
    if "seeds" in sop:
        seeds = [np.asarray(s, float) for s in sop["seeds"]]
    elif "grid" in sop:
        seeds = _seed_grid(sop["grid"]["lower"], sop["grid"]["upper"], sop["grid"]["points"])
    else:
        seeds = default_seeds(problem)
    for s in seeds:
        if s.size not in (problem.n, 2 * problem.n):
            raise ConfigError(f"sop seeds must have length {problem.n} or {2 * problem.n}")
    tol = data.get("tolerances", {})
    return ProblemConfig(
        raw=data,
        problem=problem,
        entry=entry,
        system_expr=expr,
        rtol=float(tol.get("rtol", 1e-10)),
        atol=float(tol.get("atol", 1e-12)),
        grid=int(data.get("grid", DEFAULT_GRID)),
        terminal_free=free,
        plan=_build_plan(data.get("continuation")),
        sop_seeds=seeds,
        select=sop.get("select"),
        epsilons=data.get("epsilons"),
        svg=bool(data.get("svg", True)),
        output_dir=data.get("output_dir"),
    )


def load_config(path) -> ProblemConfig:
    """Read and validate a JSON configuration file."""
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno}, "
                          f"column {exc.colno})") from None
    return config_from_dict(data)


def resolve_output_dir(cli_value=None, config: Optional[ProblemConfig] = None, default="turnpike_out"):
    """``--out-dir`` beats ``$TURNPIKE_OUT`` beats the config's ``output_dir``."""
    if cli_value:
        return cli_value
    env = os.environ.get("TURNPIKE_OUT")
    if env:
        return env
    if config is not None and config.output_dir:
        return config.output_dir
    return default
