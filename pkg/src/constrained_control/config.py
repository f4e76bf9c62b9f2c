"""Experiment configuration: JSON documents mapped onto dataclasses.

A config names a built-in problem or describes one inline::

    {
      "problem": {"name": "example2"},
      "grid": {"T": 1.0, "dt": 0.005},
      "mc": {"n_paths": 100000, "master_seed": 42},
      "policy": {"clamp_max": 10000.0},
      "start": {"t": 0.0, "x": [0.2]}
    }

Inline problems give ``dim``, ``drift`` (one expression per coordinate),
``dispersion`` (a ``dim`` by ``dim_noise`` matrix of expressions), a
``constraint`` object with a ``kind`` and, optionally, ``running_cost``
and ``terminal_cost`` expressions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry, oracles
from .dynamics import CoefficientField
from .estimator import CostSpec, ProblemSpec
from .expr import ExpressionError, compile_expression, constant_value

BUILTIN_PROBLEMS = ("example1", "example2", "example3", "unconstrained")
CONSTRAINT_KINDS = ("empty", "terminal_halfspace", "running_halfspace", "time_slab")


class ConfigError(ValueError):
    pass


@dataclass
class GridConfig:
    T: float = 1.0
    dt: float = 0.005


@dataclass
class MCConfig:
    n_paths: int = 100_000
    master_seed: int = 42
    use_bridge: bool = True
    workers: int = 1


@dataclass
class PolicyConfig:
    clamp_max: float | None = 1e4
    u_floor: float = 1e-6
    fd_step: float | None = None


@dataclass
class OutputConfig:
    csv_path: str | None = None
    fields: list | None = None
    timestamp: bool = True


@dataclass
class StartConfig:
    t: float = 0.0
    x: list | None = None


@dataclass
class ExperimentConfig:
    problem: dict = field(default_factory=lambda: {"name": "example1"})
    grid: GridConfig = field(default_factory=GridConfig)
    mc: MCConfig = field(default_factory=MCConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    outputs: OutputConfig = field(default_factory=OutputConfig)
    start: StartConfig = field(default_factory=StartConfig)

    def content_hash(self) -> str:
        """SHA-256 of the canonical JSON form, ignoring execution-only settings."""
        doc = dataclasses.asdict(self)
        doc["mc"].pop("workers")
        doc["outputs"] = {}
        blob = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()


_SECTIONS = {
    "grid": GridConfig,
    "mc": MCConfig,
    "policy": PolicyConfig,
    "outputs": OutputConfig,
    "start": StartConfig,
}


def _section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}; expected some of {sorted(known)}")
    return cls(**raw)


def from_dict(doc: dict) -> ExperimentConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be an object")
    unknown = set(doc) - set(_SECTIONS) - {"problem"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s) {sorted(unknown)}")
    cfg = ExperimentConfig()
    if "problem" in doc:
        if not isinstance(doc["problem"], dict):
            raise ConfigError("problem: expected an object")
        cfg.problem = dict(doc["problem"])
    for name, cls in _SECTIONS.items():
        if name in doc:
            setattr(cfg, name, _section(name, cls, doc[name]))
    validate(cfg)
    return cfg


def load(path: str) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return from_dict(doc)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _positive(name: str, value, integer: bool = False) -> None:
    kind = int if integer else (int, float)
    if isinstance(value, bool) or not isinstance(value, kind) or not value > 0:
        raise ConfigError(f"{name}: must be a positive {'integer' if integer else 'number'}, got {value!r}")


def validate(cfg: ExperimentConfig) -> None:
    _positive("grid.T", cfg.grid.T)
    _positive("grid.dt", cfg.grid.dt)
    if cfg.grid.dt > cfg.grid.T:
        raise ConfigError("grid.dt: must not exceed grid.T")
    _positive("mc.n_paths", cfg.mc.n_paths, integer=True)
    _positive("mc.workers", cfg.mc.workers, integer=True)
    if isinstance(cfg.mc.master_seed, bool) or not isinstance(cfg.mc.master_seed, int) or cfg.mc.master_seed < 0:
        raise ConfigError(f"mc.master_seed: must be a non-negative integer, got {cfg.mc.master_seed!r}")
    if cfg.policy.clamp_max is not None:
        _positive("policy.clamp_max", cfg.policy.clamp_max)
    _positive("policy.u_floor", cfg.policy.u_floor)
    if cfg.policy.fd_step is not None:
        _positive("policy.fd_step", cfg.policy.fd_step)
    build_problem(cfg)


def _get(d: dict, key: str, where: str, default=None, required: bool = False):
    if key not in d:
        if required:
            raise ConfigError(f"{where}.{key}: required")
        return default
    return d[key]


def _expr(source, dim: int, where: str):
    try:
        return compile_expression(source, dim)
    except ExpressionError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _inline_field(p: dict, dim: int) -> CoefficientField:
    drift_src = _get(p, "drift", "problem", ["0"] * dim)
    disp_src = _get(p, "dispersion", "problem", [["1" if i == j else "0" for j in range(dim)] for i in range(dim)])
    if not isinstance(drift_src, list) or len(drift_src) != dim:
        raise ConfigError(f"problem.drift: expected a list of {dim} expressions")
    if not isinstance(disp_src, list) or len(disp_src) != dim or not all(isinstance(r, list) for r in disp_src):
        raise ConfigError(f"problem.dispersion: expected a {dim}-row matrix of expressions")
    dim_noise = len(disp_src[0])
    if dim_noise == 0 or any(len(r) != dim_noise for r in disp_src):
        raise ConfigError("problem.dispersion: rows must have equal, non-zero length")
    mu = [_expr(s, dim, f"problem.drift[{i}]") for i, s in enumerate(drift_src)]
    sig = [[_expr(s, dim, f"problem.dispersion[{i}][{j}]") for j, s in enumerate(row)]
           for i, row in enumerate(disp_src)]

    def drift(t, x):
        return np.stack([m(t, x) for m in mu], axis=-1)

    def dispersion(t, x):
        return np.stack([np.stack([s(t, x) for s in row], axis=-1) for row in sig], axis=-2)

    return CoefficientField(dim, dim_noise, drift, dispersion)


def _inline_constraint(c: dict, dim: int, T: float) -> geometry.ConstraintSet:
    if not isinstance(c, dict):
        raise ConfigError("problem.constraint: expected an object")
    kind = _get(c, "kind", "problem.constraint", required=True)
    where = "problem.constraint"
    try:
        if kind == "empty":
            return geometry.Empty(dim=dim)
        if kind in ("terminal_halfspace", "running_halfspace"):
            axis = int(_get(c, "axis", where, 0))
            if not 0 <= axis < dim:
                raise ConfigError(f"{where}.axis: must lie in [0, {dim})")
            kw = dict(axis=axis, threshold=float(_get(c, "threshold", where, 0.0)),
                      side=_get(c, "side", where, "below"), dim=dim)
            if kind == "terminal_halfspace":
                return geometry.TerminalHalfSpace(horizon=T, **kw)
            return geometry.RunningHalfSpace(**kw)
        if kind == "time_slab":
            t0 = float(_get(c, "t0", where, required=True))
            if not 0 < t0 < T:
                raise geometry.InvalidGeometry("t0 must lie in (0, T)")
            return geometry.TimeSlab(t0=t0, lower=tuple(_get(c, "lower", where, required=True)),
                                     upper=tuple(_get(c, "upper", where, required=True)), dim=dim)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}.kind: unknown kind {kind!r}; expected one of {CONSTRAINT_KINDS}")


def _cost_term(source, dim: int, where: str):
    """``(fn, constant)``: a constant cost has no function, a varying one no constant."""
    if source is None:
        return None, 0.0
    fn = _expr(source, dim, where)
    c = constant_value(source)
    if c is not None and c < 0:
        raise ConfigError(f"{where}: costs must be non-negative")
    return (None, c) if c is not None else (fn, None)


def _costs(p: dict, dim: int) -> CostSpec:
    f, f_c = _cost_term(p.get("running_cost"), dim, "problem.running_cost")
    g, g_c = _cost_term(p.get("terminal_cost"), dim, "problem.terminal_cost")
    base = CostSpec.constant(f_c or 0.0, g_c or 0.0)
    return CostSpec(f or base.running_cost,
                    (lambda x: g(0.0, x)) if g is not None else base.terminal_cost,
                    f_c, g_c)


def build_problem(cfg: ExperimentConfig) -> ProblemSpec:
    """Resolve the ``problem`` section into a :class:`ProblemSpec`."""
    p = cfg.problem
    T = cfg.grid.T
    name = p.get("name")
    if name is not None and name not in BUILTIN_PROBLEMS:
        raise ConfigError(f"problem.name: unknown problem {name!r}; expected one of {BUILTIN_PROBLEMS} "
                          "or an inline description without a name")
    try:
        if name == "example1":
            return ProblemSpec.from_solution(oracles.example1(T))
        if name == "example2":
            return ProblemSpec.from_solution(oracles.example2(T))
        if name == "example3":
            sol = oracles.example3(T, float(p.get("t0", 0.2)), float(p.get("x0", -2.0)), float(p.get("x1", 2.0)))
            return ProblemSpec.from_solution(sol)
    except ValueError as exc:
        raise ConfigError(f"problem: {exc}") from None
    dim = p.get("dim", 1)
    _positive("problem.dim", dim, integer=True)
    fld = _inline_field(p, dim) if ("drift" in p or "dispersion" in p) else CoefficientField.brownian(dim)
    costs = _costs(p, dim)
    if name == "unconstrained":
        sol = oracles.unconstrained_case(fld, costs, T)
        if sol is oracles.DEFER_TO_ESTIMATOR:
            return ProblemSpec(fld, geometry.Empty(dim=dim), costs, T, "unconstrained")
        return ProblemSpec.from_solution(sol)
    constraint = _inline_constraint(_get(p, "constraint", "problem", {"kind": "empty"}), dim, T)
    return ProblemSpec(fld, constraint, costs, T, p.get("label", "inline"))


def default_start(cfg: ExperimentConfig) -> tuple[float, np.ndarray]:
    """Start point from the config, else a per-problem default."""
    problem = build_problem(cfg)
    if cfg.start.x is not None:
        x = np.atleast_1d(np.asarray(cfg.start.x, dtype=float))
        if x.shape != (problem.dim,):
            raise ConfigError(f"start.x: expected {problem.dim} coordinates")
        return float(cfg.start.t), x
    defaults = {"example1": -1.5, "example2": 0.2, "example3": 0.0}
    return float(cfg.start.t), np.full(problem.dim, defaults.get(problem.name, 0.0))
