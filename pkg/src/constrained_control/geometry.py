"""Forbidden sets, discrete entry-time detection and bridge corrections.

A constraint is the closed space-time set ``D`` the controlled state must
avoid.  Membership uses non-strict comparisons so that the boundary belongs
to ``D``.  All ``contains`` methods are vectorized: ``x`` has shape
``(..., dim)`` and the result has shape ``(...)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .rng import NoiseStream, bridge_uniforms

# tolerance for "t equals the slab / terminal time"
TIME_TOL = 1e-12


class DimensionMismatch(ValueError):
    pass


class InvalidGeometry(ValueError):
    pass


class KillMechanism(enum.IntEnum):
    GRID_POINT = 0
    BRIDGE_CROSSING = 1
    TERMINAL_SECTION = 2


class TerminalClass(enum.Enum):
    C_T = "C_T"
    D_INTERIOR_T = "D_interior_T"
    BOUNDARY_T = "Boundary_T"


def _same_time(t, s) -> np.ndarray:
    return np.abs(np.asarray(t, dtype=float) - s) <= TIME_TOL * max(1.0, abs(s))


class ConstraintSet:
    """Base class; subclasses are frozen dataclasses."""

    dim: int
    supports_bridge = False

    def contains(self, t, x) -> np.ndarray:
        raise NotImplementedError

    def breakpoints(self) -> tuple[float, ...]:
        """Times a simulation grid must hit exactly for detection to be exact."""
        return ()

    def bridge_probability(self, x_prev, x_next, var_axis, dt) -> np.ndarray:
        return np.zeros(np.shape(x_prev)[:-1])

    def classify_terminal(self, x) -> TerminalClass:
        raise NotImplementedError

    @property
    def is_empty(self) -> bool:
        return False


@dataclass(frozen=True)
class Empty(ConstraintSet):
    dim: int = 1

    def contains(self, t, x):
        return np.zeros(np.shape(x)[:-1], dtype=bool)

    def classify_terminal(self, x):
        return TerminalClass.C_T

    @property
    def is_empty(self):
        return True


def _signed_gap(x, axis: int, threshold: float, side: str) -> np.ndarray:
    # positive in C, zero on the barrier, negative strictly inside D
    xa = np.asarray(x, dtype=float)[..., axis]
    return xa - threshold if side == "below" else threshold - xa


def _check_side(side: str) -> None:
    if side not in ("below", "above"):
        raise ValueError(f"side must be 'below' or 'above', got {side!r}")


@dataclass(frozen=True)
class TerminalHalfSpace(ConstraintSet):
    """``D = {horizon} x {x : x[axis] <= threshold}`` (side ``"below"``)."""

    axis: int = 0
    threshold: float = 0.0
    side: str = "below"
    horizon: float = 1.0
    dim: int = 1

    def __post_init__(self):
        _check_side(self.side)

    def contains(self, t, x):
        inside = _signed_gap(x, self.axis, self.threshold, self.side) <= 0.0
        return inside & _same_time(t, self.horizon)

    def classify_terminal(self, x):
        return _classify_gap(float(_signed_gap(x, self.axis, self.threshold, self.side)))


@dataclass(frozen=True)
class RunningHalfSpace(ConstraintSet):
    """``D = [0, T] x {x : x[axis] <= threshold}`` (side ``"below"``).

    Between grid points a Brownian bridge pinned at both endpoints crosses
    the barrier with probability ``exp(-2 d0 d1 / (var_axis dt))``.
    """

    axis: int = 0
    threshold: float = 0.0
    side: str = "below"
    dim: int = 1
    supports_bridge = True

    def __post_init__(self):
        _check_side(self.side)

    def contains(self, t, x):
        inside = _signed_gap(x, self.axis, self.threshold, self.side) <= 0.0
        return np.broadcast_to(inside, np.broadcast_shapes(np.shape(inside), np.shape(t)))

    def bridge_probability(self, x_prev, x_next, var_axis, dt):
        d0 = _signed_gap(x_prev, self.axis, self.threshold, self.side)
        d1 = _signed_gap(x_next, self.axis, self.threshold, self.side)
        return bridge_crossing_probability(d0, d1, var_axis, dt)

    def classify_terminal(self, x):
        return _classify_gap(float(_signed_gap(x, self.axis, self.threshold, self.side)))


@dataclass(frozen=True)
class TimeSlab(ConstraintSet):
    """``D = {t0} x [lower, upper]`` (a closed box at one instant)."""

    t0: float = 0.5
    lower: tuple = (-1.0,)
    upper: tuple = (1.0,)
    dim: int = 1

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != self.dim or len(hi) != self.dim:
            raise DimensionMismatch("box bounds must have length dim")
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError("box must satisfy lower < upper in every coordinate")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def contains(self, t, x):
        x = np.asarray(x, dtype=float)
        inside = np.all((x >= np.array(self.lower)) & (x <= np.array(self.upper)), axis=-1)
        return inside & _same_time(t, self.t0)

    def breakpoints(self):
        return (self.t0,)

    def classify_terminal(self, x):
        # classified at the slab time, which is the terminal time of the reduced problem
        x = np.asarray(x, dtype=float)
        lo, hi = np.array(self.lower), np.array(self.upper)
        if np.any(x < lo) or np.any(x > hi):
            return TerminalClass.C_T
        if np.all(x > lo) and np.all(x < hi):
            return TerminalClass.D_INTERIOR_T
        return TerminalClass.BOUNDARY_T


@dataclass(frozen=True)
class Predicate(ConstraintSet):
    """User-supplied membership ``fn(t, x) -> bool`` (vectorized over ``x``).

    Only grid points are tested, so entry times are detected late and the
    estimated survival is biased upward by ``O(sqrt(dt))``.
    """

    fn: Callable
    dim: int = 1
    horizon: float = 1.0
    eps_bdry: float = 1e-8

    def contains(self, t, x):
        return np.asarray(self.fn(t, x), dtype=bool)

    def classify_terminal(self, x):
        x = np.asarray(x, dtype=float)
        if not bool(self.contains(self.horizon, x)):
            return TerminalClass.C_T
        probes = x + self.eps_bdry * np.concatenate([np.eye(self.dim), -np.eye(self.dim)])
        if np.any(~self.contains(self.horizon, probes)):
            return TerminalClass.BOUNDARY_T
        return TerminalClass.D_INTERIOR_T


def _classify_gap(gap: float) -> TerminalClass:
    if gap > 0.0:
        return TerminalClass.C_T
    if gap < 0.0:
        return TerminalClass.D_INTERIOR_T
    return TerminalClass.BOUNDARY_T


def bridge_crossing_probability(d0, d1, var_axis, dt) -> np.ndarray:
    """Probability that a Brownian bridge between two points in ``C`` touches the barrier.

    ``d0`` and ``d1`` are the endpoint distances to the barrier (positive
    in ``C``); endpoints on or beyond the barrier give probability one.
    """
    d0 = np.asarray(d0, dtype=float)
    d1 = np.asarray(d1, dtype=float)
    var_axis = np.asarray(var_axis, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.exp(-2.0 * d0 * d1 / (var_axis * dt))
    p = np.where(var_axis > 0.0, p, 0.0)
    return np.where((d0 <= 0.0) | (d1 <= 0.0), 1.0, p)


def _validate_dim(constraint: ConstraintSet, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x[None]
    if x.shape[-1] != constraint.dim:
        raise DimensionMismatch(f"state has length {x.shape[-1]}, constraint dim is {constraint.dim}")
    return x


def contains(constraint: ConstraintSet, t: float, x) -> bool:
    """Whether the single point ``(t, x)`` lies in ``D``."""
    x = _validate_dim(constraint, x)
    return bool(constraint.contains(t, x))


def classify_terminal(constraint: ConstraintSet, x) -> TerminalClass:
    x = _validate_dim(constraint, x)
    return constraint.classify_terminal(x)


@dataclass(frozen=True)
class KillReport:
    killed: bool
    kill_index: int | None = None
    kill_mechanism: KillMechanism | None = None

    def __post_init__(self):
        if self.killed != (self.kill_index is not None):
            raise ValueError("killed must be True exactly when kill_index is set")


def step_kill(constraint, t_next, x_prev, x_next, var_axis, dt, uniforms=None):
    """Kill test for one Euler step on a batch of live paths.

    Returns ``(grid_hit, bridge_hit)`` boolean arrays.  ``uniforms`` is
    ``None`` to disable the bridge test.
    """
    grid_hit = np.asarray(constraint.contains(t_next, x_next), dtype=bool)
    if uniforms is None or not constraint.supports_bridge:
        return grid_hit, np.zeros_like(grid_hit)
    p = constraint.bridge_probability(x_prev, x_next, var_axis, dt)
    return grid_hit, ~grid_hit & (uniforms < p)


def axis_variance(constraint: ConstraintSet, sigma: np.ndarray) -> np.ndarray | None:
    """Variance rate ``sum_j sigma[axis, j]**2`` along the barrier normal."""
    if not constraint.supports_bridge:
        return None
    return np.sum(np.asarray(sigma)[..., constraint.axis, :] ** 2, axis=-1)


def detect_kill(constraint, path, stream: NoiseStream | None = None, use_bridge: bool = True,
                field=None) -> KillReport:
    """First entry of a recorded path into ``D``.

    The bridge test needs the dispersion along the barrier normal, so
    ``field`` is required when ``use_bridge`` is set for a running
    half-space.  Bernoulli draws come from ``stream``'s bridge lane, which
    makes the result identical to the on-line detection performed during
    batch simulation.
    """
    states = _validate_dim(constraint, path.states)
    times = path.grid.times
    if constraint.is_empty:
        return KillReport(False)
    last = len(times) - 1
    if bool(constraint.contains(times[0], states[0])):
        return KillReport(True, 0, KillMechanism.TERMINAL_SECTION if last == 0 else KillMechanism.GRID_POINT)
    bridge = use_bridge and constraint.supports_bridge
    if bridge and (stream is None or field is None):
        raise ValueError("bridge detection needs the path's NoiseStream and CoefficientField")
    keys = stream.keys() if bridge else None
    dts = np.diff(times)
    for k in range(last):
        uniforms = var = None
        if bridge:
            sigma = field.dispersion_at(times[k], states[k][None])
            var = axis_variance(constraint, sigma)
            uniforms = bridge_uniforms(keys, stream.counter + k)
        grid_hit, bridge_hit = step_kill(constraint, times[k + 1], states[k][None], states[k + 1][None],
                                         var, dts[k], uniforms)
        if grid_hit[0]:
            mech = KillMechanism.TERMINAL_SECTION if k + 1 == last else KillMechanism.GRID_POINT
            return KillReport(True, k + 1, mech)
        if bridge_hit[0]:
            return KillReport(True, k + 1, KillMechanism.BRIDGE_CROSSING)
    return KillReport(False)
