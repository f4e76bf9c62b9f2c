"""Monte Carlo estimation of the killed expectation ``u`` and its gradient.

``u(t, x) = E[exp(-1/2 int_t^T f(s, Z_s) ds - 1/2 g(Z_T)) 1{Z survives in C}]``
for the uncontrolled diffusion ``Z`` started at ``(t, x)``.  Killed paths
contribute zero; they are never discarded.

The running cost must be integrable along surviving paths.  Nothing here
checks that for an unbounded ``f``; it is the caller's responsibility.
"""

from __future__ import annotations

import hashlib
import logging
import math
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .dynamics import CoefficientField, TimeGrid, map_chunks, simulate_batch

log = logging.getLogger(__name__)

NONFINITE_WARN_FRACTION = 1e-3


class AllPathsNonFinite(ArithmeticError):
    pass


class PointOutsideC(ValueError):
    pass


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``f(t, x) >= 0`` and terminal cost ``g(x) >= 0``.

    ``None`` stands for the zero function.  ``running_constant`` and
    ``terminal_constant`` record costs known to be constant, which unlocks
    the closed form of the unconstrained case.
    """

    running_cost: Callable | None = None
    terminal_cost: Callable | None = None
    running_constant: float | None = None
    terminal_constant: float | None = None

    def __post_init__(self):
        if self.running_cost is None and self.running_constant is None:
            object.__setattr__(self, "running_constant", 0.0)
        if self.terminal_cost is None and self.terminal_constant is None:
            object.__setattr__(self, "terminal_constant", 0.0)

    @classmethod
    def constant(cls, running: float = 0.0, terminal: float = 0.0) -> "CostSpec":
        if running < 0 or terminal < 0:
            raise ValueError("costs must be non-negative")
        f = None if running == 0 else (lambda t, x: np.full(np.shape(x)[:-1], float(running)))
        g = None if terminal == 0 else (lambda x: np.full(np.shape(x)[:-1], float(terminal)))
        return cls(f, g, float(running), float(terminal))

    @property
    def is_zero(self) -> bool:
        return self.running_constant == 0.0 and self.terminal_constant == 0.0

    def g(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.terminal_cost is None:
            return np.zeros(x.shape[:-1])
        return np.broadcast_to(np.asarray(self.terminal_cost(x), dtype=float), x.shape[:-1])

    def f(self, t, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.running_cost is None:
            return np.zeros(x.shape[:-1])
        return np.broadcast_to(np.asarray(self.running_cost(t, x), dtype=float), x.shape[:-1])


@dataclass(frozen=True)
class ProblemSpec:
    field: CoefficientField
    constraint: geometry.ConstraintSet
    costs: CostSpec
    horizon: float
    name: str = "custom"
    solution: object | None = None  # ClosedFormSolution when one is known

    def __post_init__(self):
        if self.constraint.dim != self.field.dim_state:
            raise geometry.DimensionMismatch("constraint and coefficient field disagree on dim")
        if not self.horizon > 0:
            raise ValueError("horizon must be positive")

    @classmethod
    def from_solution(cls, sol) -> "ProblemSpec":
        return cls(sol.field, sol.constraint, sol.costs, sol.horizon, sol.name, sol)

    @property
    def dim(self) -> int:
        return self.field.dim_state

    def grid(self, t: float, dt: float, extra_breakpoints: Sequence[float] = ()) -> TimeGrid:
        return TimeGrid(t, self.horizon, dt, tuple(self.constraint.breakpoints()) + tuple(extra_breakpoints))

    def state(self, x) -> np.ndarray:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        if x.shape != (self.dim,):
            raise geometry.DimensionMismatch(f"expected a state of length {self.dim}, got shape {x.shape}")
        return x


@dataclass(frozen=True)
class Estimate:
    mean: float
    std_error: float
    n_paths: int
    n_nonfinite: int = 0

    @property
    def nonfinite_warning(self) -> bool:
        return self.n_nonfinite > NONFINITE_WARN_FRACTION * (self.n_paths + self.n_nonfinite)

    @classmethod
    def from_samples(cls, values: np.ndarray, n_nonfinite: int = 0) -> "Estimate":
        values = np.asarray(values, dtype=float)
        n = len(values)
        if n == 0:
            raise AllPathsNonFinite("no finite paths")
        se = float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        return cls(float(np.mean(values)), se, n, int(n_nonfinite))

    @classmethod
    def exact(cls, value: float) -> "Estimate":
        return cls(float(value), 0.0, 1, 0)


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    std_error: np.ndarray
    n_paths: int
    step: np.ndarray


def _at_horizon(problem: ProblemSpec, t: float) -> bool:
    return t >= problem.horizon - 1e-12 * max(1.0, problem.horizon)


def u_samples(problem: ProblemSpec, t: float, x, n_paths: int, dt: float, master_seed: int, *,
              use_bridge: bool = True, path_offset: int = 0, workers: int = 1):
    """Per-path integrands of ``u`` and the non-finite mask, in path-index order."""
    x = problem.state(x)
    grid = problem.grid(t, dt)
    costs = problem.costs

    def run(idx):
        b = simulate_batch(problem.field, t, x, grid, master_seed, idx,
                           constraint=problem.constraint, use_bridge=use_bridge,
                           running_cost=costs.running_cost)
        with np.errstate(over="ignore", invalid="ignore"):
            weight = np.exp(-0.5 * b.running_cost_integral - 0.5 * costs.g(b.terminal_states))
        return np.where(b.killed, 0.0, weight), b.nonfinite

    parts = map_chunks(run, n_paths, path_offset, workers)
    values = np.concatenate([p[0] for p in parts])
    bad = np.concatenate([p[1] for p in parts])
    return values, bad


def _summarize(values, bad) -> Estimate:
    n_bad = int(bad.sum())
    if n_bad == len(values):
        raise AllPathsNonFinite(f"all {n_bad} paths became non-finite")
    est = Estimate.from_samples(values[~bad], n_bad)
    if est.nonfinite_warning:
        log.warning("%d of %d paths became non-finite; grid may be too coarse", n_bad, len(values))
    return est


def estimate_u(problem: ProblemSpec, t: float, x, n_paths: int, dt: float, master_seed: int, *,
               use_bridge: bool = True, path_offset: int = 0, workers: int = 1) -> Estimate:
    """Monte Carlo estimate of ``u(t, x)`` on an Euler grid of step ``dt``."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    xs = problem.state(x)
    if bool(problem.constraint.contains(t, xs)):
        return Estimate.exact(0.0)
    if _at_horizon(problem, t):
        return Estimate.exact(float(np.exp(-0.5 * problem.costs.g(xs[None])[0])))
    values, bad = u_samples(problem, t, xs, n_paths, dt, master_seed,
                            use_bridge=use_bridge, path_offset=path_offset, workers=workers)
    return _summarize(values, bad)


def point_offset(t: float, x) -> int:
    """Path-index offset owned by the point ``(t, x)``.

    Distinct points get disjoint index ranges of length ``2**32`` (up to a
    hash collision); the same point always maps to the same range.
    """
    raw = struct.pack(f"<{1 + len(np.atleast_1d(x))}d", float(t), *map(float, np.atleast_1d(x)))
    h = int.from_bytes(hashlib.blake2b(raw, digest_size=8).digest(), "little")
    return (h & 0x7FFFFFFF) << 32


def estimate_u_grid(problem: ProblemSpec, points: Sequence, n_paths: int, dt: float, master_seed: int, *,
                    use_bridge: bool = True, workers: int = 1) -> list:
    """``estimate_u`` at each ``(t, x)``; a failing point yields its exception object."""
    out = []
    for t, x in points:
        try:
            out.append(estimate_u(problem, t, x, n_paths, dt, master_seed, use_bridge=use_bridge,
                                  path_offset=point_offset(t, x), workers=workers))
        except (AllPathsNonFinite, geometry.DimensionMismatch, ValueError) as exc:
            out.append(exc)
    return out


def default_fd_step(problem: ProblemSpec, t: float) -> np.ndarray:
    return np.full(problem.dim, max(1e-3, 1e-2 * math.sqrt(max(problem.horizon - t, 0.0))))


def crn_gradient_samples(problem: ProblemSpec, t: float, x, h, n_paths: int, dt: float, master_seed: int, *,
                         use_bridge: bool = True, path_offset: int = 0, workers: int = 1):
    """Per-path central differences on common random numbers.

    Returns ``(diffs, bad)`` where ``diffs`` has shape ``(n_paths, d)``.
    """
    xs = problem.state(x)
    h = np.broadcast_to(np.asarray(h, dtype=float), (problem.dim,))
    if np.any(h <= 0):
        raise ValueError("finite-difference steps must be positive")
    cols, bad = [], np.zeros(n_paths, dtype=bool)
    for i in range(problem.dim):
        e = np.zeros(problem.dim)
        e[i] = h[i]
        for probe in (xs + e, xs - e):
            if bool(problem.constraint.contains(t, probe)):
                raise PointOutsideC(f"probe point {probe} at t={t} lies in D")
        up, bad_up = u_samples(problem, t, xs + e, n_paths, dt, master_seed,
                               use_bridge=use_bridge, path_offset=path_offset, workers=workers)
        dn, bad_dn = u_samples(problem, t, xs - e, n_paths, dt, master_seed,
                               use_bridge=use_bridge, path_offset=path_offset, workers=workers)
        cols.append((up - dn) / (2.0 * h[i]))
        bad |= bad_up | bad_dn
    return np.stack(cols, axis=-1), bad


def estimate_grad_u(problem: ProblemSpec, t: float, x, h=None, *, n_paths: int, dt: float, master_seed: int,
                    use_bridge: bool = True, path_offset: int = 0, workers: int = 1) -> GradientEstimate:
    """Central-difference gradient of ``u`` with both probes on the same streams."""
    if _at_horizon(problem, t):
        raise ValueError("gradient of u is only defined for t < T")
    h = default_fd_step(problem, t) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (problem.dim,))
    diffs, bad = crn_gradient_samples(problem, t, x, h, n_paths, dt, master_seed,
                                      use_bridge=use_bridge, path_offset=path_offset, workers=workers)
    good = diffs[~bad]
    if len(good) == 0:
        raise AllPathsNonFinite("all paths became non-finite")
    se = np.std(good, axis=0, ddof=1) / math.sqrt(len(good)) if len(good) > 1 else np.zeros(problem.dim)
    return GradientEstimate(np.mean(good, axis=0), se, len(good), np.array(h))
