"""Euler-Maruyama integration of controlled and uncontrolled diffusions.

The batch engine advances many paths at once.  Each path reads its own
counter-based noise stream, so a path's trajectory depends only on
``(master_seed, path_index)`` and never on the batch it was computed in.
Batches are cut into fixed chunks of ``CHUNK_SIZE`` path indices, which is
what makes results independent of the number of worker threads.

Coefficient functions are vectorized: ``drift(t, x)`` takes ``x`` of shape
``(n, d)`` and returns ``(n, d)``; ``dispersion(t, x)`` returns
``(n, d, d')``.  Local Lipschitz continuity and linear growth of the
coefficients are the caller's responsibility.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import geometry
from .rng import NoiseStream, bridge_uniforms, path_keys, standard_normals

CHUNK_SIZE = 8192
_NOISE_BLOCK = 32


class NonFiniteState(ArithmeticError):
    """A state coordinate overflowed or became NaN."""


@dataclass(frozen=True)
class CoefficientField:
    dim_state: int
    dim_noise: int
    drift: Callable
    dispersion: Callable

    @classmethod
    def constant(cls, drift, dispersion) -> "CoefficientField":
        mu = np.atleast_1d(np.asarray(drift, dtype=float))
        sig = np.atleast_2d(np.asarray(dispersion, dtype=float))
        if sig.shape[0] != mu.shape[0]:
            raise ValueError("dispersion must have one row per state coordinate")
        return cls(
            mu.shape[0],
            sig.shape[1],
            lambda t, x: np.broadcast_to(mu, np.shape(x)),
            lambda t, x: np.broadcast_to(sig, np.shape(x)[:-1] + sig.shape),
        )

    @classmethod
    def brownian(cls, dim: int = 1) -> "CoefficientField":
        """Zero drift, identity dispersion."""
        return cls.constant(np.zeros(dim), np.eye(dim))

    def drift_at(self, t, x) -> np.ndarray:
        return np.broadcast_to(np.asarray(self.drift(t, x), dtype=float), np.shape(x))

    def dispersion_at(self, t, x) -> np.ndarray:
        shape = np.shape(x)[:-1] + (self.dim_state, self.dim_noise)
        return np.broadcast_to(np.asarray(self.dispersion(t, x), dtype=float), shape)


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_start + k dt`` with the last point clamped to ``t_end``.

    ``breakpoints`` are extra times the grid must contain exactly (a
    time-slab instant, a checkpoint).  A grid point within ``1e-9 dt`` of a
    breakpoint is moved onto it; otherwise the breakpoint splits a step.
    """

    t_start: float
    t_end: float
    dt: float
    breakpoints: tuple = ()
    times: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.t_start < self.t_end:
            raise ValueError("need t_start < t_end")
        span = self.t_end - self.t_start
        n = max(1, math.ceil(span / self.dt - 1e-9))
        times = self.t_start + np.arange(n + 1) * self.dt
        times[-1] = self.t_end
        for b in sorted(set(float(b) for b in self.breakpoints)):
            if not self.t_start < b < self.t_end:
                continue
            k = int(np.argmin(np.abs(times - b)))
            if abs(times[k] - b) <= 1e-9 * self.dt:
                times[k] = b
            else:
                times = np.sort(np.append(times, b))
        object.__setattr__(self, "breakpoints", tuple(sorted(set(float(b) for b in self.breakpoints))))
        object.__setattr__(self, "times", times)

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        k = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[k] - t) > 1e-9 * self.dt:
            raise ValueError(f"time {t} is not a grid point")
        return k


@dataclass
class PathSample:
    """One recorded trajectory."""

    grid: TimeGrid
    states: np.ndarray
    killed: bool = False
    kill_index: int | None = None
    running_cost_integral: float = 0.0
    control_energy_integral: float = 0.0
    kill_mechanism: geometry.KillMechanism | None = None


@dataclass
class PathBatch:
    """Per-path outcomes of a batch simulation, indexed like ``path_indices``.

    ``kill_index`` is -1 for surviving paths.  ``snapshots`` maps a grid
    index to the states at that index; ``kill_states`` holds the state at
    the kill index (NaN for survivors).
    """

    grid: TimeGrid
    path_indices: np.ndarray
    terminal_states: np.ndarray
    killed: np.ndarray
    kill_index: np.ndarray
    kill_mechanism: np.ndarray
    running_cost_integral: np.ndarray
    control_energy_integral: np.ndarray
    nonfinite: np.ndarray
    clamp_hits: np.ndarray
    kill_states: np.ndarray
    snapshots: dict = field(default_factory=dict)
    states: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return len(self.path_indices)

    @property
    def violation_fraction(self) -> float:
        ok = ~self.nonfinite
        return float(np.mean(self.killed[ok])) if ok.any() else float("nan")

    def stopped_snapshot(self, index: int) -> np.ndarray:
        """State at ``min(index, kill_index)``: the path stopped on entering ``D``."""
        snap = self.snapshots[index]
        stop = self.killed & (self.kill_index <= index)
        return np.where(stop[:, None], self.kill_states, snap)

    def path(self, i: int) -> PathSample:
        if self.states is None:
            raise ValueError("batch was simulated without record=True")
        k = int(self.kill_index[i])
        mech = int(self.kill_mechanism[i])
        return PathSample(
            grid=self.grid,
            states=self.states[i],
            killed=bool(self.killed[i]),
            kill_index=k if k >= 0 else None,
            running_cost_integral=float(self.running_cost_integral[i]),
            control_energy_integral=float(self.control_energy_integral[i]),
            kill_mechanism=geometry.KillMechanism(mech) if mech >= 0 else None,
        )

    @classmethod
    def concatenate(cls, parts: Sequence["PathBatch"]) -> "PathBatch":
        first = parts[0]
        cat = lambda name: np.concatenate([getattr(p, name) for p in parts])
        return cls(
            grid=first.grid,
            path_indices=cat("path_indices"),
            terminal_states=cat("terminal_states"),
            killed=cat("killed"),
            kill_index=cat("kill_index"),
            kill_mechanism=cat("kill_mechanism"),
            running_cost_integral=cat("running_cost_integral"),
            control_energy_integral=cat("control_energy_integral"),
            nonfinite=cat("nonfinite"),
            clamp_hits=cat("clamp_hits"),
            kill_states=cat("kill_states"),
            snapshots={k: np.concatenate([p.snapshots[k] for p in parts]) for k in first.snapshots},
            states=None if first.states is None else cat("states"),
        )


def simulate_batch(
    field: CoefficientField,
    start_time: float,
    start_state,
    grid: TimeGrid,
    master_seed: int,
    path_indices,
    *,
    policy=None,
    constraint: geometry.ConstraintSet | None = None,
    use_bridge: bool = True,
    running_cost: Callable | None = None,
    costs_stop_at_kill: bool = True,
    record: bool = False,
    snapshot_indices: Sequence[int] = (),
    raise_on_nonfinite: bool = False,
) -> PathBatch:
    """Simulate one chunk of paths with on-line kill detection.

    Running cost and control energy are left-rectangle sums.  With
    ``costs_stop_at_kill`` the sums freeze at the kill index; otherwise the
    realized cost over the whole horizon is accumulated.  A path whose state
    turns non-finite is frozen and flagged instead of aborting the batch.
    """
    if abs(start_time - grid.t_start) > 1e-12 * max(1.0, abs(grid.t_start)):
        raise ValueError("start time must equal grid.t_start")
    idx = np.atleast_1d(np.asarray(path_indices, dtype=np.uint64))
    n, d, dn = len(idx), field.dim_state, field.dim_noise
    x = np.tile(np.atleast_1d(np.asarray(start_state, dtype=float)), (n, 1))
    if x.shape[1] != d:
        raise geometry.DimensionMismatch(f"start state has length {x.shape[1]}, field dim is {d}")
    keys = path_keys(master_seed, idx)
    times, dts = grid.times, grid.steps
    n_steps = grid.n_steps

    killed = np.zeros(n, dtype=bool)
    kill_index = np.full(n, -1, dtype=np.int64)
    kill_mech = np.full(n, -1, dtype=np.int8)
    kill_states = np.full((n, d), np.nan)
    nonfinite = np.zeros(n, dtype=bool)
    clamp_hits = np.zeros(n, dtype=np.int64)
    rc = np.zeros(n)
    ce = np.zeros(n)
    snaps = {int(k): None for k in snapshot_indices}
    states = np.empty((n, n_steps + 1, d)) if record else None

    detect = constraint is not None and not constraint.is_empty
    bridge = detect and use_bridge and constraint.supports_bridge
    if detect:
        hit = np.asarray(constraint.contains(times[0], x), dtype=bool)
        killed |= hit
        kill_index[hit] = 0
        kill_mech[hit] = geometry.KillMechanism.GRID_POINT
        kill_states[hit] = x[hit]
    if record:
        states[:, 0] = x
    if 0 in snaps:
        snaps[0] = x.copy()

    noise = None
    for k in range(n_steps):
        if k % _NOISE_BLOCK == 0:
            noise = standard_normals(keys, k, min(_NOISE_BLOCK, n_steps - k), dn)
        t, dt = times[k], dts[k]
        counting = ~nonfinite & ~(killed & costs_stop_at_kill)
        mu = field.drift_at(t, x)
        sig = field.dispersion_at(t, x)
        drift = mu
        if policy is not None:
            if hasattr(policy, "evaluate"):
                a, clamped = policy.evaluate(t, x)
                clamp_hits += clamped
            else:
                a = np.asarray(policy(t, x), dtype=float)
            drift = mu + np.einsum("nij,nj->ni", sig, a)
            ce += np.where(counting, np.sum(a * a, axis=-1), 0.0) * dt
        if running_cost is not None:
            rc += np.where(counting, np.asarray(running_cost(t, x), dtype=float), 0.0) * dt
        dw = noise[:, k % _NOISE_BLOCK] * math.sqrt(dt)
        with np.errstate(over="ignore", invalid="ignore"):
            x_new = x + drift * dt + np.einsum("nij,nj->ni", sig, dw)
        bad = ~np.all(np.isfinite(x_new), axis=-1)
        if bad.any():
            if raise_on_nonfinite:
                raise NonFiniteState(f"non-finite state at step {k + 1}, t={times[k + 1]}")
            nonfinite |= bad
        x_new[nonfinite] = x[nonfinite]

        if detect:
            live = ~killed & ~nonfinite
            var = geometry.axis_variance(constraint, sig) if bridge else None
            u = bridge_uniforms(keys, k) if bridge else None
            grid_hit, bridge_hit = geometry.step_kill(constraint, times[k + 1], x, x_new, var, dt, u)
            new_grid = live & grid_hit
            new_bridge = live & bridge_hit
            new = new_grid | new_bridge
            if new.any():
                killed |= new
                kill_index[new] = k + 1
                last = geometry.KillMechanism.TERMINAL_SECTION if k + 1 == n_steps else geometry.KillMechanism.GRID_POINT
                kill_mech[new_grid] = last
                kill_mech[new_bridge] = geometry.KillMechanism.BRIDGE_CROSSING
                kill_states[new] = x_new[new]
        x = x_new
        if record:
            states[:, k + 1] = x
        if k + 1 in snaps:
            snaps[k + 1] = x.copy()

    return PathBatch(
        grid=grid,
        path_indices=idx,
        terminal_states=x,
        killed=killed,
        kill_index=kill_index,
        kill_mechanism=kill_mech,
        running_cost_integral=rc,
        control_energy_integral=ce,
        nonfinite=nonfinite,
        clamp_hits=clamp_hits,
        kill_states=kill_states,
        snapshots=snaps,
        states=states,
    )


def chunk_ranges(n_paths: int, path_offset: int = 0, chunk_size: int = CHUNK_SIZE):
    """Fixed ``(start, stop)`` index ranges covering ``n_paths`` paths."""
    return [
        (path_offset + lo, path_offset + min(lo + chunk_size, n_paths))
        for lo in range(0, n_paths, chunk_size)
    ]


def map_chunks(fn: Callable, n_paths: int, path_offset: int = 0, workers: int = 1) -> list:
    """Apply ``fn(path_indices)`` to every chunk, results in chunk order."""
    ranges = chunk_ranges(n_paths, path_offset)
    if workers <= 1 or len(ranges) == 1:
        return [fn(np.arange(lo, hi, dtype=np.uint64)) for lo, hi in ranges]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: fn(np.arange(*r, dtype=np.uint64)), ranges))


def simulate_paths(field, start_time, start_state, grid, master_seed, n_paths, *, path_offset=0,
                   workers=1, **kwargs) -> PathBatch:
    """Chunked, optionally threaded :func:`simulate_batch` over ``n_paths`` paths."""
    parts = map_chunks(
        lambda idx: simulate_batch(field, start_time, start_state, grid, master_seed, idx, **kwargs),
        n_paths, path_offset, workers,
    )
    return PathBatch.concatenate(parts)


def simulate_uncontrolled(field: CoefficientField, start, grid: TimeGrid, stream: NoiseStream,
                          running_cost: Callable | None = None) -> PathSample:
    """Single Euler path of the uncontrolled SDE; kill detection is left to geometry."""
    return simulate_controlled(field, None, start, grid, stream, running_cost)


def simulate_controlled(field: CoefficientField, policy, start, grid: TimeGrid, stream: NoiseStream,
                        running_cost: Callable | None = None) -> PathSample:
    """Single Euler path with drift ``mu + sigma a``, ``a = policy(t_k, X_k)``.

    Raises :class:`NonFiniteState` if the path blows up.  Uses the same
    increments as :func:`simulate_uncontrolled` on the same stream.
    """
    if stream.counter != 0:
        raise ValueError("path simulation reads its stream from counter 0")
    t0, x0 = start
    batch = simulate_batch(field, t0, x0, grid, stream.master_seed, [stream.path_index],
                           policy=policy, running_cost=running_cost, costs_stop_at_kill=False,
                           record=True, raise_on_nonfinite=True)
    return batch.path(0)
