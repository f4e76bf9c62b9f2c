"""Numerical checks of the theory's consequences.

* finite-difference residuals of the HJB equation for ``v`` and of the
  linear equation for ``u``;
* realized cost of a policy against the value function;
* the optional-stopping identity for ``Theta_s = exp(-1/2 int f) u(s, Z_s)``;
* equality in law of the reweighted uncontrolled state and the optimally
  controlled state (Kolmogorov-Smirnov distance with a calibrated threshold);
* a brute-force running-minimum oracle for Brownian survival.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.stats import kstwobign

from . import estimator as est
from .dynamics import CoefficientField, TimeGrid, map_chunks, simulate_batch, simulate_paths


class ProbeOutsideC(ValueError):
    pass


class RequiresUOracle(ValueError):
    pass


class DegenerateWeights(ArithmeticError):
    pass


MIN_EFFECTIVE_SAMPLE = 100
TERM_NAMES = ("time_derivative", "generator", "quadratic_gradient", "running_cost")


@dataclass(frozen=True)
class ResidualReport:
    point: tuple
    residual: float
    fd_steps: tuple
    terms: dict

    def __post_init__(self):
        if set(self.terms) != set(TERM_NAMES):
            raise ValueError(f"terms must be exactly {TERM_NAMES}")


def _stencil_points(t: float, x: np.ndarray, h_t: float, h_x: float):
    d = len(x)
    eye = np.eye(d) * h_x
    pts = [(t, x), (t + h_t, x), (t - h_t, x)]
    for i in range(d):
        pts += [(t, x + eye[i]), (t, x - eye[i])]
    for i in range(d):
        for j in range(i + 1, d):
            pts += [(t, x + eye[i] + eye[j]), (t, x + eye[i] - eye[j]),
                    (t, x - eye[i] + eye[j]), (t, x - eye[i] - eye[j])]
    return pts


def _derivatives(fn: Callable, t: float, x, h_t: float, h_x: float, constraint=None, horizon=None):
    """Central differences ``(value, d/dt, gradient, Hessian)`` of ``fn`` at ``(t, x)``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    d = len(x)
    if not (h_t > 0 and h_x > 0):
        raise ValueError("finite-difference steps must be positive")
    if horizon is not None and t + h_t >= horizon:
        raise ProbeOutsideC(f"time probe {t + h_t} reaches the horizon {horizon}")
    pts = _stencil_points(t, x, h_t, h_x)
    ts = np.array([p[0] for p in pts])
    xs = np.array([p[1] for p in pts])
    if constraint is not None and np.any(constraint.contains(ts, xs)):
        raise ProbeOutsideC(f"a finite-difference probe around ({t}, {x}) lies in D")
    vals = np.asarray(fn(ts, xs), dtype=float).reshape(len(pts))
    if not np.all(np.isfinite(vals)):
        raise ProbeOutsideC(f"non-finite value at a probe around ({t}, {x})")
    c = vals[0]
    dt_ = (vals[1] - vals[2]) / (2.0 * h_t)
    grad = np.empty(d)
    hess = np.empty((d, d))
    for i in range(d):
        p, m = vals[3 + 2 * i], vals[4 + 2 * i]
        grad[i] = (p - m) / (2.0 * h_x)
        hess[i, i] = (p - 2.0 * c + m) / h_x**2
    k = 3 + 2 * d
    for i in range(d):
        for j in range(i + 1, d):
            pp, pm, mp, mm = vals[k:k + 4]
            hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4.0 * h_x**2)
            k += 4
    return c, dt_, grad, hess


def _generator(field: CoefficientField, t: float, x: np.ndarray, grad, hess):
    sig = field.dispersion_at(t, x[None])[0]
    mu = field.drift_at(t, x[None])[0]
    return 0.5 * float(np.sum((sig @ sig.T) * hess)) + float(mu @ grad), sig


def _f_at(f, t, x) -> float:
    return 0.0 if f is None else float(np.asarray(f(t, x[None])).reshape(-1)[0])


def hjb_residual(v_fn: Callable, field: CoefficientField, f: Callable | None, point, h_t: float, h_x: float,
                 *, constraint=None, horizon: float | None = None) -> ResidualReport:
    """``d_t v + 1/2 tr(sigma sigma^T D^2 v) + <mu, grad v> - 1/4 |sigma^T grad v|^2 + f``."""
    t, x = point
    x = np.atleast_1d(np.asarray(x, dtype=float))
    _, dv_dt, grad, hess = _derivatives(v_fn, t, x, h_t, h_x, constraint, horizon)
    gen, sig = _generator(field, t, x, grad, hess)
    terms = {
        "time_derivative": dv_dt,
        "generator": gen,
        "quadratic_gradient": -0.25 * float(np.sum((sig.T @ grad) ** 2)),
        "running_cost": _f_at(f, t, x),
    }
    return ResidualReport((t, tuple(x)), sum(terms[k] for k in TERM_NAMES), (h_t, h_x), terms)


def pde_residual_u(u_fn: Callable, field: CoefficientField, f: Callable | None, point, h_t: float, h_x: float,
                   *, constraint=None, horizon: float | None = None) -> ResidualReport:
    """``d_t u + L u - 1/2 f u``; robust where ``u`` is tiny and ``ln`` would amplify noise."""
    t, x = point
    x = np.atleast_1d(np.asarray(x, dtype=float))
    u, du_dt, grad, hess = _derivatives(u_fn, t, x, h_t, h_x, constraint, horizon)
    gen, _ = _generator(field, t, x, grad, hess)
    terms = {
        "time_derivative": du_dt,
        "generator": gen,
        "quadratic_gradient": 0.0,
        "running_cost": -0.5 * _f_at(f, t, x) * u,
    }
    return ResidualReport((t, tuple(x)), sum(terms[k] for k in TERM_NAMES), (h_t, h_x), terms)


@dataclass(frozen=True)
class CostReport:
    policy_name: str
    start: tuple
    estimate: est.Estimate
    reference: float | None
    violation_fraction: float
    clamp_fraction: float = 0.0

    @property
    def note(self) -> str:
        if self.violation_fraction > 0:
            return ("some controlled paths entered D; their realized cost is included, "
                    "although an inadmissible control has infinite cost by convention")
        return ""


def cost_of_policy(problem: est.ProblemSpec, policy, start, n_paths: int, dt: float, master_seed: int, *,
                   reference: float | None = None, use_bridge: bool = True, path_offset: int = 0,
                   workers: int = 1) -> CostReport:
    """Monte Carlo cost ``E[int (f + |a|^2) ds + g(X_T)]`` of a feedback policy.

    Each Euler step is interpolated by a Brownian bridge (the bridge law
    does not depend on the drift), so with ``use_bridge`` a path also
    counts as violating when its interpolation touches a running barrier.
    Violating paths stay in the average with the cost realized up to their
    first detected entry into ``D``; the controlled state is only defined
    up to that time.
    """
    t, x = start
    xs = problem.state(x)
    if bool(problem.constraint.contains(t, xs)):
        raise est.PointOutsideC(f"start ({t}, {xs}) lies in D")
    grid = problem.grid(t, dt)
    batch = simulate_paths(problem.field, t, xs, grid, master_seed, n_paths, path_offset=path_offset,
                           workers=workers, policy=policy, constraint=problem.constraint,
                           use_bridge=use_bridge, running_cost=problem.costs.running_cost,
                           costs_stop_at_kill=True)
    ok = ~batch.nonfinite
    if not ok.any():
        raise est.AllPathsNonFinite("all controlled paths became non-finite")
    stopped_early = batch.killed & (batch.kill_index < grid.n_steps)
    terminal = np.where(stopped_early, 0.0, problem.costs.g(batch.terminal_states))
    total = batch.running_cost_integral + batch.control_energy_integral + terminal
    estimate = est.Estimate.from_samples(total[ok], int((~ok).sum()))
    return CostReport(getattr(policy, "name", "") or "policy", (t, tuple(xs)), estimate, reference,
                      float(batch.killed.mean()), float((batch.clamp_hits > 0).mean()))


def _u_oracle(problem: est.ProblemSpec, u_fn):
    if u_fn is not None:
        return u_fn
    if problem.solution is not None:
        return problem.solution.u
    raise RequiresUOracle("no closed-form u is registered for this problem; pass u_fn")


def _grid_until(problem: est.ProblemSpec, t: float, s: float, dt: float) -> TimeGrid:
    bps = tuple(b for b in problem.constraint.breakpoints() if t < b < s)
    return TimeGrid(t, s, dt, bps)


def theta_martingale_check(problem: est.ProblemSpec, start, checkpoints: Sequence[float], n_paths: int,
                           dt: float, master_seed: int, *, u_fn: Callable | None = None,
                           use_bridge: bool = True, workers: int = 1) -> dict:
    """Estimates of ``E[Theta_s]`` for each checkpoint ``s``; each should equal ``u(t, x)``.

    All checkpoints share the same paths, since a grid ending at ``s`` is a
    prefix of one ending later.  A path killed by time ``s`` contributes
    zero because ``u`` vanishes on ``D``.
    """
    u = _u_oracle(problem, u_fn)
    t, x = start
    xs = problem.state(x)
    if bool(problem.constraint.contains(t, xs)):
        raise est.PointOutsideC(f"start ({t}, {xs}) lies in D")
    out = {}
    for s in checkpoints:
        if not t < s <= problem.horizon:
            raise ValueError(f"checkpoint {s} must lie in ({t}, {problem.horizon}]")
        grid = _grid_until(problem, t, s, dt)

        def run(idx, grid=grid, s=s):
            b = simulate_batch(problem.field, t, xs, grid, master_seed, idx, constraint=problem.constraint,
                               use_bridge=use_bridge, running_cost=problem.costs.running_cost)
            theta = np.exp(-0.5 * b.running_cost_integral) * np.asarray(u(s, b.terminal_states), dtype=float)
            return np.where(b.killed, 0.0, theta), b.nonfinite

        parts = map_chunks(run, n_paths, 0, workers)
        vals = np.concatenate([p[0] for p in parts])
        bad = np.concatenate([p[1] for p in parts])
        out[float(s)] = est.Estimate.from_samples(vals[~bad], int(bad.sum()))
    return out


def weighted_ks(a: np.ndarray, wa: np.ndarray | None, b: np.ndarray, wb: np.ndarray | None = None) -> float:
    """Kolmogorov-Smirnov distance between two weighted empirical CDFs."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    wa = np.ones(len(a)) if wa is None else np.asarray(wa, dtype=float)
    wb = np.ones(len(b)) if wb is None else np.asarray(wb, dtype=float)
    ia, ib = np.argsort(a, kind="stable"), np.argsort(b, kind="stable")
    a, wa, b, wb = a[ia], wa[ia], b[ib], wb[ib]
    ca = np.concatenate([[0.0], np.cumsum(wa)]) / wa.sum()
    cb = np.concatenate([[0.0], np.cumsum(wb)]) / wb.sum()
    pts = np.concatenate([a, b])
    fa = ca[np.searchsorted(a, pts, side="right")]
    fb = cb[np.searchsorted(b, pts, side="right")]
    return float(np.max(np.abs(fa - fb)))


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=float)
    s2 = float(np.sum(w * w))
    return 0.0 if s2 == 0 else float(np.sum(w)) ** 2 / s2


@dataclass(frozen=True)
class LawReport:
    ks: float
    threshold: float
    n_effective: float
    n_controlled: int
    mean_weight: float
    clamp_fraction: float

    @property
    def passed(self) -> bool:
        return self.ks <= self.threshold


def _weighted_z(problem, t, xs, s, dt, master_seed, n_paths, path_offset, u0, use_bridge, workers):
    """``Z_s`` and the density ``Theta_T / u(t, x)`` of the reweighted measure."""
    grid = problem.grid(t, dt, (s,))
    k = grid.index_of(s)
    batch = simulate_paths(problem.field, t, xs, grid, master_seed, n_paths, path_offset=path_offset,
                           workers=workers, constraint=problem.constraint, use_bridge=use_bridge,
                           running_cost=problem.costs.running_cost, snapshot_indices=(k,))
    with np.errstate(over="ignore"):
        w = np.exp(-0.5 * batch.running_cost_integral - 0.5 * problem.costs.g(batch.terminal_states)) / u0
    w = np.where(batch.killed | batch.nonfinite, 0.0, w)
    return batch.snapshots[k], w


def htransform_law_check(problem: est.ProblemSpec, start, s: float, n_paths: int, dt: float, master_seed: int,
                         policy, *, u0: float | None = None, n_pilot: int = 4000, pilot_reps: int = 50,
                         quantile: float = 0.99, use_bridge: bool = True, workers: int = 1) -> LawReport:
    """KS distance between reweighted ``Z_s`` and optimally controlled ``X*_s``.

    The threshold comes from a pilot: ``pilot_reps`` pairs of independent
    reweighted ensembles of size ``n_pilot`` sample the null distribution
    of the KS statistic scaled by the effective sizes.  An empirical 99%
    quantile of 50 draws is little more than their maximum, so the pilot
    only fixes the scale: the Kolmogorov quantile is multiplied by the
    ratio of the pilot median to the Kolmogorov median, then rescaled to
    the sizes of the main comparison.  Multivariate states are compared
    along their first coordinate.
    """
    t, x = start
    xs = problem.state(x)
    if not t < s < problem.horizon:
        raise ValueError(f"s must lie in ({t}, {problem.horizon})")
    if u0 is None:
        u0 = float(_u_oracle(problem, None)(t, xs))
    if not u0 > 0:
        raise est.PointOutsideC("u(t, x) = 0: the reweighted measure is undefined")
    z, w = _weighted_z(problem, t, xs, s, dt, master_seed, n_paths, 0, u0, use_bridge, workers)
    n_eff = effective_sample_size(w)
    if n_eff < MIN_EFFECTIVE_SAMPLE:
        raise DegenerateWeights(f"effective sample size {n_eff:.1f} is below {MIN_EFFECTIVE_SAMPLE}")

    xgrid = _grid_until(problem, t, s, dt)
    controlled = simulate_paths(problem.field, t, xs, xgrid, master_seed, n_paths, path_offset=1 << 62,
                                workers=workers, policy=policy, constraint=problem.constraint, use_bridge=False)
    x_s = np.where(controlled.killed[:, None], controlled.kill_states, controlled.terminal_states)
    ks = weighted_ks(z[:, 0], w, x_s[:, 0])

    scaled = []
    for r in range(pilot_reps):
        base = (1 << 61) + 2 * r * (1 << 32)
        za, wa = _weighted_z(problem, t, xs, s, dt, master_seed, n_pilot, base, u0, use_bridge, workers)
        zb, wb = _weighted_z(problem, t, xs, s, dt, master_seed, n_pilot, base + (1 << 32), u0, use_bridge, workers)
        na, nb = effective_sample_size(wa), effective_sample_size(wb)
        scaled.append(weighted_ks(za[:, 0], wa, zb[:, 0], wb) * math.sqrt(na * nb / (na + nb)))
    scale = float(np.median(scaled)) / kstwobign.median()
    threshold = float(kstwobign.ppf(quantile) * scale) * math.sqrt(1.0 / n_eff + 1.0 / n_paths)
    return LawReport(ks, threshold, n_eff, n_paths, float(np.mean(w)), float((controlled.clamp_hits > 0).mean()))


def reflection_bruteforce_u(x: float, T_minus_t: float, n_paths: int, dt: float, seed: int,
                            chunk: int = 4096) -> est.Estimate:
    """Fraction of Brownian paths whose running minimum over the grid stays above ``-x``.

    Deliberately independent of the library: numpy's own generator, no
    bridge correction, no killed-expectation weights.  The discrete minimum
    misses excursions between grid points, so the estimate is biased upward
    by ``O(sqrt(dt))``.
    """
    if not x > 0:
        raise ValueError("x must be positive")
    n_steps = max(1, int(round(T_minus_t / dt)))
    step = math.sqrt(T_minus_t / n_steps)
    rng = np.random.default_rng(seed)
    survived = 0
    done = 0
    while done < n_paths:
        m = min(chunk, n_paths - done)
        paths = np.cumsum(rng.standard_normal((m, n_steps)), axis=1) * step
        survived += int(np.count_nonzero(paths.min(axis=1) > -x))
        done += m
    p = survived / n_paths
    return est.Estimate(p, math.sqrt(p * (1.0 - p) / n_paths), n_paths)
