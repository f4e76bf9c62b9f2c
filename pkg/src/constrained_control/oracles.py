"""Closed-form ground truth for the one-dimensional Brownian examples.

All three examples use ``mu = 0``, ``sigma = 1`` and zero costs; they differ
only in the forbidden set:

* ``example1``: ``D = {T} x (-inf, 0]`` (terminal constraint),
* ``example2``: ``D = [0, T] x (-inf, 0]`` (running constraint),
* ``example3``: ``D = {t0} x [x0, x1]`` (one-instant slab, solved on ``[0, t0]``).

Functions take ``t`` (scalar or array) and ``x`` with a trailing state axis
of length one; scalars are accepted for ``x`` as well.  Ratios such as
``phi / Phi`` are evaluated in log space so the optimal control stays finite
deep in the tails.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import special

from . import geometry
from .dynamics import CoefficientField
from .estimator import CostSpec

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


def std_normal_pdf(z):
    return np.exp(-0.5 * np.square(z) - _LOG_SQRT_2PI)


def std_normal_cdf(x):
    # erfc-based: accurate to ~1e-16 relative in both tails
    return 0.5 * special.erfc(-np.asarray(x, dtype=float) / np.sqrt(2.0))


def _log_pdf(z):
    return -0.5 * np.square(z) - _LOG_SQRT_2PI


@dataclass(frozen=True)
class ClosedFormSolution:
    """Exact ``u``, ``grad u``, ``v`` and optimal control of a problem.

    ``grad_log_u`` is ``grad u / u`` computed stably; the optimal control is
    ``sigma^T grad_log_u`` on ``C_[0,T)`` and zero elsewhere.
    """

    name: str
    horizon: float
    field: CoefficientField
    constraint: geometry.ConstraintSet
    u: Callable
    grad_u: Callable
    grad_log_u: Callable
    costs: CostSpec = CostSpec()
    # end of the interval on which the control problem is posed (t0 for the slab example)
    control_horizon: float | None = None

    @property
    def terminal_time(self) -> float:
        return self.horizon if self.control_horizon is None else self.control_horizon

    def v(self, t, x):
        u = np.asarray(self.u(t, x), dtype=float)
        with np.errstate(divide="ignore"):
            return np.where(u > 0.0, 0.0 - 2.0 * np.log(np.where(u > 0.0, u, 1.0)), np.inf)

    def alpha_star(self, t, x):
        x = _as_states(x)
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        sigma = self.field.dispersion_at(t, x)
        active = (t < self.terminal_time) & ~np.asarray(self.constraint.contains(t, x), dtype=bool)
        g = np.asarray(self.grad_log_u(t, x), dtype=float)
        with np.errstate(invalid="ignore"):
            a = np.einsum("...ij,...i->...j", sigma, g)
        return np.where(active[..., None] & np.isfinite(a), a, 0.0)


def _as_states(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[..., None] if x.ndim == 0 else x


def _first(x) -> np.ndarray:
    return _as_states(x)[..., 0]


def _tau(t, horizon):
    return horizon - np.asarray(t, dtype=float)


def example1(T: float = 1.0) -> ClosedFormSolution:
    if not T > 0:
        raise ValueError("T must be positive")

    def u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        with np.errstate(divide="ignore", invalid="ignore"):
            inner = std_normal_cdf(x1 / np.sqrt(np.where(tau > 0, tau, 1.0)))
        return np.where(tau > 0, inner, (x1 > 0).astype(float))

    def grad_u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        s = np.sqrt(np.where(tau > 0, tau, np.nan))
        return (std_normal_pdf(x1 / s) / s)[..., None]

    def grad_log_u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        s = np.sqrt(np.where(tau > 0, tau, np.nan))
        z = x1 / s
        return (np.exp(_log_pdf(z) - special.log_ndtr(z)) / s)[..., None]

    return ClosedFormSolution(
        "example1", T, CoefficientField.brownian(1),
        geometry.TerminalHalfSpace(axis=0, threshold=0.0, side="below", horizon=T),
        u, grad_u, grad_log_u,
    )


def example2(T: float = 1.0) -> ClosedFormSolution:
    if not T > 0:
        raise ValueError("T must be positive")

    def u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        s = np.sqrt(np.where(tau > 0, tau, 1.0))
        # 2 Phi(z) - 1 = erf(z / sqrt 2), accurate for small z
        inner = special.erf(x1 / (s * np.sqrt(2.0)))
        return np.where(x1 > 0, np.where(tau > 0, inner, 1.0), 0.0)

    def grad_u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        s = np.sqrt(np.where(tau > 0, tau, np.nan))
        return (2.0 * std_normal_pdf(x1 / s) / s)[..., None]

    def grad_log_u(t, x):
        x1, tau = np.broadcast_arrays(_first(x), _tau(t, T))
        s = np.sqrt(np.where(tau > 0, tau, np.nan))
        z = x1 / s
        with np.errstate(divide="ignore", invalid="ignore"):
            return (2.0 * std_normal_pdf(z) / (special.erf(z / np.sqrt(2.0)) * s))[..., None]

    return ClosedFormSolution(
        "example2", T, CoefficientField.brownian(1),
        geometry.RunningHalfSpace(axis=0, threshold=0.0, side="below"),
        u, grad_u, grad_log_u,
    )


def example3(T: float = 1.0, t0: float = 0.2, x0: float = -2.0, x1: float = 2.0) -> ClosedFormSolution:
    """Slab ``{t0} x [x0, x1]``; after ``t0`` nothing is constrained and ``u = 1``."""
    if not x0 < x1:
        raise geometry.InvalidGeometry("need x0 < x1")
    if not 0.0 < t0 < T:
        raise geometry.InvalidGeometry("need 0 < t0 < T")

    def _args(t, x):
        xs, tau = np.broadcast_arrays(_first(x), _tau(t, t0))
        s = np.sqrt(np.where(tau > 0, tau, np.nan))
        return xs, tau, s, (xs - x1) / s, (x0 - xs) / s

    def u(t, x):
        xs, tau, s, a, b = _args(t, x)
        with np.errstate(invalid="ignore"):
            before = std_normal_cdf(a) + std_normal_cdf(b)
        at = 1.0 - ((xs >= x0) & (xs <= x1)).astype(float)
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), xs.shape)
        on_slab = np.abs(t_arr - t0) <= geometry.TIME_TOL * max(1.0, t0)
        return np.where(on_slab, at, np.where(tau > 0, before, 1.0))

    def grad_u(t, x):
        xs, tau, s, a, b = _args(t, x)
        g = (std_normal_pdf(a) - std_normal_pdf(b)) / s
        return np.where(tau > 0, g, 0.0)[..., None]

    def grad_log_u(t, x):
        xs, tau, s, a, b = _args(t, x)
        with np.errstate(invalid="ignore"):
            log_u = np.logaddexp(special.log_ndtr(a), special.log_ndtr(b))
            g = (np.exp(_log_pdf(a) - log_u) - np.exp(_log_pdf(b) - log_u)) / s
        return np.where(tau > 0, g, 0.0)[..., None]

    return ClosedFormSolution(
        "example3", T, CoefficientField.brownian(1),
        geometry.TimeSlab(t0=t0, lower=(x0,), upper=(x1,)),
        u, grad_u, grad_log_u, control_horizon=t0,
    )


DEFER_TO_ESTIMATOR = "defer-to-estimator"


def unconstrained_case(field: CoefficientField, costs, horizon: float = 1.0):
    """``D`` empty with constant costs: ``u = exp(-c_f (T - t) / 2 - c_g / 2)``.

    Costs that are not known constants have no closed form here; the
    marker :data:`DEFER_TO_ESTIMATOR` is returned instead.
    """
    costs = CostSpec() if costs is None else costs
    f_c, g_c = costs.running_constant, costs.terminal_constant
    if f_c is None or g_c is None:
        return DEFER_TO_ESTIMATOR
    d = field.dim_state

    def u(t, x):
        shape = np.shape(x)[:-1] if np.ndim(x) else ()
        tau = np.broadcast_to(np.maximum(_tau(t, horizon), 0.0), shape)
        return np.exp(-0.5 * f_c * tau - 0.5 * g_c)

    def zero_grad(t, x):
        shape = np.shape(x)[:-1] if np.ndim(x) else ()
        return np.zeros(np.broadcast_shapes(shape, np.shape(t)) + (d,))

    return ClosedFormSolution(
        "unconstrained", horizon, field, geometry.Empty(dim=d),
        u, zero_grad, zero_grad, costs=costs,
    )


REGISTRY = {
    "example1": example1,
    "example2": example2,
    "example3": example3,
}
