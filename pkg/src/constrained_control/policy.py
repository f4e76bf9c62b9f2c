"""Value function ``v = -2 ln u`` and the optimal feedback control.

The optimal control is the logarithmic gradient of ``u`` seen through the
dispersion, ``alpha*(t, x) = sigma^T(t, x) grad u(t, x) / u(t, x)`` on
``C_[0,T)`` and zero elsewhere, equivalently ``-1/2 sigma^T grad v``.  It
pushes the state towards regions where survival is more likely: for the
terminal half-space example it is positive below the barrier.
"""

from __future__ import annotations

import enum
import math
import threading
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import estimator as est
from .dynamics import CoefficientField

DEFAULT_CLAMP_MAX = 1e4
DEFAULT_U_FLOOR = 1e-6
# below this u, grad u / u is replaced by the solution's log-space control
_U_UNDERFLOW = 1e-250


class OutOfRange(ValueError):
    pass


class PolicySource(enum.Enum):
    CLOSED_FORM = "ClosedForm"
    MONTE_CARLO_FD = "MonteCarloFD"
    ZERO = "Zero"
    USER_SUPPLIED = "UserSupplied"


@dataclass(frozen=True)
class FeedbackPolicy:
    """Markov control ``(t, x) -> a`` with an optional cap on ``|a|``.

    ``control`` is vectorized: ``x`` of shape ``(n, d)`` gives ``(n, d')``.
    """

    control: Callable
    dim_noise: int
    clamp_max: float | None = None
    source: PolicySource = PolicySource.USER_SUPPLIED
    name: str = ""

    def evaluate(self, t, x):
        """Return ``(a, clamped)`` for a batch of states."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = x[None] if single else x
        a = np.array(np.broadcast_to(np.asarray(self.control(t, xb), dtype=float), (len(xb), self.dim_noise)))
        clamped = np.zeros(len(xb), dtype=bool)
        if self.clamp_max is not None and math.isfinite(self.clamp_max):
            norm = np.sqrt(np.sum(a * a, axis=-1))
            clamped = norm > self.clamp_max
            if clamped.any():
                a[clamped] *= (self.clamp_max / norm[clamped])[:, None]
        return (a[0], clamped[0]) if single else (a, clamped)

    def __call__(self, t, x):
        return self.evaluate(t, x)[0]


def clamp(policy: FeedbackPolicy, clamp_max: float) -> FeedbackPolicy:
    """Rescale controls whose norm exceeds ``clamp_max``; direction is kept."""
    if not clamp_max > 0:
        raise ValueError("clamp_max must be positive")
    return replace(policy, clamp_max=float(clamp_max))


def zero_policy(dim_noise: int = 1) -> FeedbackPolicy:
    return FeedbackPolicy(lambda t, x: np.zeros((len(x), dim_noise)), dim_noise,
                          source=PolicySource.ZERO, name="zero")


def value_from_u(u_value: float) -> float:
    """``-2 ln u``, with ``+inf`` at ``u = 0``."""
    if not 0.0 <= u_value <= 1.0:
        raise OutOfRange(f"u must lie in [0, 1], got {u_value}")
    return math.inf if u_value == 0.0 else 0.0 - 2.0 * math.log(u_value)


@dataclass(frozen=True)
class ValueFunction:
    evaluate: Callable
    source: PolicySource

    def __call__(self, t, x):
        return self.evaluate(t, x)


def value_function_closed_form(solution) -> ValueFunction:
    return ValueFunction(solution.v, PolicySource.CLOSED_FORM)


def alpha_star_closed_form(solution, field: CoefficientField | None = None,
                           clamp_max: float | None = None) -> FeedbackPolicy:
    """Optimal feedback ``sigma^T grad u / u`` from a closed-form ``u``.

    ``solution`` provides ``u``, ``grad_u``, ``constraint`` and
    ``terminal_time``; if it also has ``alpha_star`` that expression is
    used where ``u`` underflows.
    """
    field = solution.field if field is None else field
    constraint = solution.constraint
    t_end = solution.terminal_time
    fallback = getattr(solution, "alpha_star", None)

    def control(t, x):
        x = np.asarray(x, dtype=float)
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        active = (t_arr < t_end) & ~np.asarray(constraint.contains(t_arr, x), dtype=bool)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            u = np.asarray(solution.u(t_arr, x), dtype=float)
            grad = np.asarray(solution.grad_u(t_arr, x), dtype=float)
            ratio = grad / u[..., None]
            a = np.einsum("...ij,...i->...j", field.dispersion_at(t_arr, x), ratio)
        if fallback is not None:
            tiny = active & (u < _U_UNDERFLOW)
            if tiny.any():
                a = np.where(tiny[..., None], fallback(t_arr, x), a)
        return np.where(active[..., None] & np.isfinite(a), a, 0.0)

    return FeedbackPolicy(control, field.dim_noise, clamp_max, PolicySource.CLOSED_FORM,
                          name=f"alpha*[{getattr(solution, 'name', 'closed-form')}]")


@dataclass(frozen=True)
class MCPolicyConfig:
    n_paths: int = 20_000
    dt: float = 0.005
    master_seed: int = 0
    u_floor: float = DEFAULT_U_FLOOR
    fd_step: float | None = None
    time_spacing: float | None = None  # default: dt
    space_spacing: float | None = None  # default: 0.05 sqrt(T)
    use_bridge: bool = True
    workers: int = 1


class NodeFlag(enum.Enum):
    OK = "ok"
    DEGENERATE_VALUE = "DegenerateValue"
    OUTSIDE_C = "OutsideC"
    PROBE_OUTSIDE_C = "ProbeOutsideC"
    AT_HORIZON = "AtHorizon"


@dataclass(frozen=True)
class NodeControl:
    control: np.ndarray
    std_error: np.ndarray
    u: float
    flag: NodeFlag


def mc_control_at(problem: est.ProblemSpec, t: float, x, config: MCPolicyConfig) -> NodeControl:
    """Monte Carlo ``sigma^T grad u / u`` at one point, with a delta-method SE.

    ``u`` and the central differences share their paths, so the ratio's
    standard error comes from the per-path residuals ``g_j - R y_j``.
    Raises :class:`estimator.PointOutsideC` if a probe lies in ``D``.
    """
    xs = problem.state(x)
    zero = np.zeros(problem.field.dim_noise)
    if t >= problem.horizon:
        return NodeControl(zero, zero, float("nan"), NodeFlag.AT_HORIZON)
    if bool(problem.constraint.contains(t, xs)):
        return NodeControl(zero, zero, 0.0, NodeFlag.OUTSIDE_C)
    h = est.default_fd_step(problem, t) if config.fd_step is None else np.full(problem.dim, config.fd_step)
    offset = est.point_offset(t, xs)
    kw = dict(use_bridge=config.use_bridge, path_offset=offset, workers=config.workers)
    y, bad = est.u_samples(problem, t, xs, config.n_paths, config.dt, config.master_seed, **kw)
    g, bad_g = est.crn_gradient_samples(problem, t, xs, h, config.n_paths, config.dt, config.master_seed, **kw)
    ok = ~(bad | bad_g)
    y, g = y[ok], g[ok]
    u_hat = float(np.mean(y))
    if u_hat < config.u_floor:
        return NodeControl(zero, zero, u_hat, NodeFlag.DEGENERATE_VALUE)
    grad = np.mean(g, axis=0)
    sigma_t = problem.field.dispersion_at(t, xs[None])[0].T
    control = sigma_t @ (grad / u_hat)
    resid = (g - np.outer(y, grad / u_hat)) / u_hat
    se = np.std(resid @ sigma_t.T, axis=0, ddof=1) / math.sqrt(len(y))
    return NodeControl(control, se, u_hat, NodeFlag.OK)


@dataclass
class LatticeMemo:
    """Node values of a Monte Carlo control on a regular space-time lattice.

    Nodes are filled lazily under a lock and never change afterwards, so a
    policy evaluates identically regardless of query order.
    """

    problem: est.ProblemSpec
    config: MCPolicyConfig
    nodes: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def time_spacing(self) -> float:
        return self.config.time_spacing or self.config.dt

    @property
    def space_spacing(self) -> float:
        return self.config.space_spacing or 0.05 * math.sqrt(self.problem.horizon)

    def node(self, key: tuple) -> NodeControl:
        with self._lock:
            if key not in self.nodes:
                t = key[0] * self.time_spacing
                x = np.array(key[1:], dtype=float) * self.space_spacing
                try:
                    value = mc_control_at(self.problem, t, x, self.config)
                except est.PointOutsideC:
                    zero = np.zeros(self.problem.field.dim_noise)
                    value = NodeControl(zero, zero, float("nan"), NodeFlag.PROBE_OUTSIDE_C)
                self.nodes[key] = value
            return self.nodes[key]

    def interpolate(self, t: float, x: np.ndarray) -> np.ndarray:
        """Multilinear interpolation of node controls; ``x`` has shape ``(n, d)``."""
        n, d = x.shape
        st = t / self.time_spacing
        it = math.floor(st + 1e-9)
        wt = max(0.0, st - it)
        sx = x / self.space_spacing
        ix = np.floor(sx).astype(np.int64)
        wx = sx - ix
        out = np.zeros((n, self.problem.field.dim_noise))
        for corner in range(2 ** (d + 1)):
            bits = [(corner >> j) & 1 for j in range(d + 1)]
            w = (wt if bits[0] else 1.0 - wt) * np.ones(n)
            for j in range(d):
                w = w * np.where(bits[j + 1], wx[:, j], 1.0 - wx[:, j])
            keys = ix + np.array(bits[1:])
            uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
            vals = np.array([self.node((it + bits[0],) + tuple(int(v) for v in row)).control for row in uniq])
            out += w[:, None] * vals[inverse.reshape(-1)]
        return out


def alpha_star_mc(problem: est.ProblemSpec, config: MCPolicyConfig = MCPolicyConfig(),
                  clamp_max: float | None = DEFAULT_CLAMP_MAX) -> FeedbackPolicy:
    """Optimal feedback from Monte Carlo ``u`` and ``grad u`` on a memoized lattice.

    The returned policy exposes its memo as ``policy.control.memo``.
    """
    memo = LatticeMemo(problem, config)

    def control(t, x):
        x = np.asarray(x, dtype=float)
        t_arr = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        a = memo.interpolate(float(t), x)
        outside = (t_arr >= problem.horizon) | np.asarray(problem.constraint.contains(t_arr, x), dtype=bool)
        return np.where(outside[..., None], 0.0, a)

    control.memo = memo
    return FeedbackPolicy(control, problem.field.dim_noise, clamp_max, PolicySource.MONTE_CARLO_FD,
                          name=f"alpha*-mc[{problem.name}]")
