"""Command-line experiment runner.

Subcommands ``estimate``, ``grid``, ``simulate``, ``cost`` and ``verify``
read an optional JSON config (see :mod:`constrained_control.config`),
apply flag overrides and write CSV.  Exit codes: 0 success, 1 config
error, 2 tolerance failure, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import io
import itertools
import math
import sys
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from . import estimator as est
from . import geometry
from . import policy as pol
from . import verify as vf
from .dynamics import NonFiniteState, simulate_paths
from .expr import ExpressionError

EXIT_OK, EXIT_CONFIG, EXIT_TOLERANCE, EXIT_NUMERICAL = 0, 1, 2, 3
CHECKS = ("hjb", "pde", "theta", "htransform", "cost")
SIMULATE_DEFAULT_PATHS = 10

_UNITS = {
    "t": "time", "path_id": "index", "u_mean": "probability", "u_se": "probability",
    "u_exact": "probability", "v": "cost", "J_mean": "cost", "J_se": "cost", "v_ref": "cost",
    "violation_fraction": "fraction", "clamp_fraction": "fraction", "n_paths": "count", "seed": "integer",
    "measured": "check-specific", "bound": "check-specific",
}


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _x_columns(dim: int) -> list:
    return [f"x_{i + 1}" for i in range(dim)]


def write_csv(cfg: cfgmod.ExperimentConfig, command: str, columns: list, rows: list, summary: dict | None = None,
              out=None) -> str:
    """Render and write a CSV document; returns the text."""
    buf = io.StringIO()
    buf.write(f"# constrained_control {command}\n")
    if cfg.outputs.timestamp:
        buf.write(f"# generated: {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}\n")
    buf.write(f"# config_sha256: {cfg.content_hash()}\n")
    units = "; ".join(f"{c}={_UNITS.get(c, 'state' if c.startswith('x_') else 'text')}" for c in columns)
    buf.write(f"# units: {units}\n")
    fields = cfg.outputs.fields
    keep = [i for i, c in enumerate(columns) if not fields or c in fields]
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([columns[i] for i in keep])
    for row in rows:
        writer.writerow([_fmt(row[i]) for i in keep])
    if summary:
        buf.write("# summary: " + ", ".join(f"{k}={_fmt(v)}" for k, v in summary.items()) + "\n")
    text = buf.getvalue()
    path = cfg.outputs.csv_path
    if path:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    (out or sys.stdout).write(text)
    return text


def _floats(text: str, flag: str) -> list:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise cfgmod.ConfigError(f"{flag}: expected comma-separated numbers, got {text!r}") from None


def resolve_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if args.config else cfgmod.ExperimentConfig()
    if args.problem:
        cfg.problem = {"name": args.problem}
    if args.seed is not None:
        cfg.mc.master_seed = args.seed
    if args.paths is not None:
        cfg.mc.n_paths = args.paths
    if args.dt is not None:
        cfg.grid.dt = args.dt
    if args.workers is not None:
        cfg.mc.workers = args.workers
    if args.no_bridge:
        cfg.mc.use_bridge = False
    if args.clamp is not None:
        cfg.policy.clamp_max = None if math.isinf(args.clamp) else args.clamp
    if args.out:
        cfg.outputs.csv_path = args.out
    if args.no_timestamp:
        cfg.outputs.timestamp = False
    if args.t is not None:
        cfg.start.t = args.t
    if args.x is not None:
        cfg.start.x = _floats(args.x, "--x")
    cfgmod.validate(cfg)
    return cfg


def _value(u: float) -> float:
    return pol.value_from_u(min(max(u, 0.0), 1.0))


def cmd_estimate(cfg, args, out=None) -> int:
    problem = cfgmod.build_problem(cfg)
    t, x = cfgmod.default_start(cfg)
    e = est.estimate_u(problem, t, x, cfg.mc.n_paths, cfg.grid.dt, cfg.mc.master_seed,
                       use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    cols = ["t", *_x_columns(problem.dim), "u_mean", "u_se", "v", "n_paths", "seed"]
    row = [t, *x, e.mean, e.std_error, _value(e.mean), e.n_paths, cfg.mc.master_seed]
    summary = {"nonfinite_paths": e.n_nonfinite} if e.n_nonfinite else None
    write_csv(cfg, "estimate", cols, [row], summary, out)
    return EXIT_OK


def cmd_grid(cfg, args, out=None) -> int:
    problem = cfgmod.build_problem(cfg)
    t0, base = cfgmod.default_start(cfg)
    ts = _floats(args.t_values, "--t-values") if args.t_values else [t0]
    xs = _floats(args.x_values, "--x-values") if args.x_values else [float(base[0])]
    points = []
    for t, x1 in itertools.product(ts, xs):
        x = base.copy()
        x[0] = x1
        points.append((t, x))
    results = est.estimate_u_grid(problem, points, cfg.mc.n_paths, cfg.grid.dt, cfg.mc.master_seed,
                                  use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    exact = problem.solution.u if problem.solution is not None else None
    cols = ["t", *_x_columns(problem.dim), "u_mean", "u_se", "v", "u_exact", "n_paths", "seed", "status"]
    rows = []
    for (t, x), r in zip(points, results):
        ue = float(exact(t, x)) if exact is not None else float("nan")
        if isinstance(r, Exception):
            rows.append([t, *x, float("nan"), float("nan"), float("nan"), ue, 0, cfg.mc.master_seed,
                         f"error: {type(r).__name__}"])
        else:
            rows.append([t, *x, r.mean, r.std_error, _value(r.mean), ue, r.n_paths, cfg.mc.master_seed, "ok"])
    write_csv(cfg, "grid", cols, rows, None, out)
    return EXIT_OK


def optimal_policy(problem: est.ProblemSpec, cfg) -> pol.FeedbackPolicy:
    if problem.solution is not None:
        return pol.alpha_star_closed_form(problem.solution, clamp_max=cfg.policy.clamp_max)
    mc = pol.MCPolicyConfig(n_paths=min(cfg.mc.n_paths, 20_000), dt=cfg.grid.dt, master_seed=cfg.mc.master_seed,
                            u_floor=cfg.policy.u_floor, fd_step=cfg.policy.fd_step,
                            use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    return pol.alpha_star_mc(problem, mc, clamp_max=cfg.policy.clamp_max)


def inverse_policy(clamp_max=None) -> pol.FeedbackPolicy:
    """``a(t, x) = 1 / x_1`` for ``x_1 > 0``, else 0 (a Bessel-type drift that keeps ``x_1`` positive)."""
    def control(t, x):
        x1 = np.asarray(x, dtype=float)[..., :1]
        return np.where(x1 > 0, 1.0 / np.where(x1 > 0, x1, 1.0), 0.0)
    return pol.FeedbackPolicy(control, 1, clamp_max, pol.PolicySource.USER_SUPPLIED, name="inverse")


def _policy_by_name(name: str, problem, cfg) -> pol.FeedbackPolicy:
    if name == "optimal":
        return optimal_policy(problem, cfg)
    if name == "zero":
        return pol.zero_policy(problem.field.dim_noise)
    if problem.field.dim_noise != 1:
        raise cfgmod.ConfigError("the inverse policy needs a one-dimensional noise")
    return inverse_policy(cfg.policy.clamp_max)


def cmd_simulate(cfg, args, out=None) -> int:
    problem = cfgmod.build_problem(cfg)
    t, x = cfgmod.default_start(cfg)
    if bool(problem.constraint.contains(t, x)):
        raise cfgmod.ConfigError(f"start point ({t}, {list(x)}) lies in D")
    n = args.paths if args.paths is not None else SIMULATE_DEFAULT_PATHS
    policy = optimal_policy(problem, cfg)
    grid = problem.grid(t, cfg.grid.dt)
    batch = simulate_paths(problem.field, t, x, grid, cfg.mc.master_seed, n, workers=cfg.mc.workers,
                           policy=policy, constraint=problem.constraint, use_bridge=cfg.mc.use_bridge,
                           record=True)
    cols = ["path_id", "t", *_x_columns(problem.dim)]
    rows = [[i, grid.times[k], *batch.states[i, k]] for i in range(n) for k in range(grid.n_steps + 1)]
    summary = {
        "n_paths": n,
        "violation_fraction": batch.violation_fraction,
        "killed_paths": " ".join(str(i) for i in np.flatnonzero(batch.killed)) or "none",
        "clamp_fraction": float((batch.clamp_hits > 0).mean()),
        "policy": policy.name,
    }
    write_csv(cfg, "simulate", cols, rows, summary, out)
    return EXIT_OK


def cmd_cost(cfg, args, out=None) -> int:
    problem = cfgmod.build_problem(cfg)
    t, x = cfgmod.default_start(cfg)
    policy = _policy_by_name(args.policy, problem, cfg)
    ref = float(problem.solution.v(t, x)) if problem.solution is not None else float("nan")
    r = vf.cost_of_policy(problem, policy, (t, x), cfg.mc.n_paths, cfg.grid.dt, cfg.mc.master_seed,
                          reference=ref, use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    cols = ["policy", "t", *_x_columns(problem.dim), "J_mean", "J_se", "v_ref", "violation_fraction",
            "clamp_fraction", "n_paths", "seed"]
    row = [args.policy, t, *x, r.estimate.mean, r.estimate.std_error, ref, r.violation_fraction,
           r.clamp_fraction, r.estimate.n_paths, cfg.mc.master_seed]
    write_csv(cfg, "cost", cols, [row], {"note": r.note} if r.note else None, out)
    return EXIT_OK


# ----------------------------------------------------------------------------- verify

VERIFY_STARTS = {"example1": 0.5, "example2": 1.0, "example3": 0.0}
RESIDUAL_H = 1e-4
RESIDUAL_BOUND = 1e-3
RATIO_STEPS = (0.02, 0.01)
RATIO_BAND = (3.5, 4.5)


@dataclass
class CheckRow:
    check: str
    item: str
    measured: float
    bound: float
    passed: bool


def residual_lattice(problem: est.ProblemSpec, n: int = 5):
    """Interior ``n x n`` lattice of ``(t, x)`` points away from ``D`` and the horizon."""
    sol = problem.solution
    T = sol.terminal_time
    if problem.name == "example3":
        c = problem.constraint
        ts = np.linspace(0.1 * T, 0.5 * T, n)
        xs = np.linspace(c.lower[0] - 1.0, c.upper[0] + 1.0, n)
    elif problem.name == "example2":
        ts, xs = np.linspace(0.1 * T, 0.8 * T, n), np.linspace(0.4, 2.0, n) * math.sqrt(T)
    else:
        ts, xs = np.linspace(0.1 * T, 0.8 * T, n), np.linspace(-1.0, 1.5, n) * math.sqrt(T)
    return [(float(t), np.array([x] + [0.0] * (problem.dim - 1))) for t in ts for x in xs]


def _residual_rows(kind: str, problem: est.ProblemSpec) -> list:
    sol = problem.solution
    fn, op = (sol.u, vf.pde_residual_u) if kind == "pde" else (sol.v, vf.hjb_residual)
    f = problem.costs.running_cost
    if f is None and problem.costs.running_constant:
        c = problem.costs.running_constant
        f = lambda t, x: np.full(np.shape(x)[:-1], c)  # noqa: E731
    lattice = residual_lattice(problem)

    def run(h):
        return np.array([op(fn, sol.field, f, p, h, h, constraint=sol.constraint, horizon=sol.terminal_time).residual
                         for p in lattice])

    base = run(RESIDUAL_H)
    worst = float(np.max(np.abs(base)))
    rows = [CheckRow(kind, f"max|residual| h={RESIDUAL_H}", worst, RESIDUAL_BOUND, worst <= RESIDUAL_BOUND)]
    coarse, fine = (float(np.sqrt(np.mean(run(h) ** 2))) for h in RATIO_STEPS)
    if fine < 1e-12 and coarse < 1e-12:
        rows.append(CheckRow(kind, "rms ratio (exact zero residual)", 0.0, 0.0, True))
    else:
        ratio = coarse / fine
        rows.append(CheckRow(kind, f"rms ratio h={RATIO_STEPS[0]}/{RATIO_STEPS[1]}", ratio, RATIO_BAND[1],
                             RATIO_BAND[0] <= ratio <= RATIO_BAND[1]))
    return rows


def _verify_start(problem, cfg):
    if cfg.start.x is not None:
        return cfgmod.default_start(cfg)
    return float(cfg.start.t), np.full(problem.dim, VERIFY_STARTS.get(problem.name, 0.0))


def _theta_rows(problem, cfg) -> list:
    t, x = _verify_start(problem, cfg)
    T = problem.solution.terminal_time if problem.solution is not None else problem.horizon
    checkpoints = [t + q * (T - t) for q in (0.25, 0.5, 0.75)]
    res = vf.theta_martingale_check(problem, (t, x), checkpoints, cfg.mc.n_paths, cfg.grid.dt, cfg.mc.master_seed,
                                    use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    target = float(problem.solution.u(t, x))
    rows = []
    for s, e in res.items():
        gap = abs(e.mean - target)
        rows.append(CheckRow("theta", f"s={s:.6g} |mean-u|", gap, 4 * e.std_error, gap <= 4 * e.std_error + 1e-15))
    for (s1, a), (s2, b) in itertools.combinations(res.items(), 2):
        gap, se = abs(a.mean - b.mean), math.hypot(a.std_error, b.std_error)
        rows.append(CheckRow("theta", f"s={s1:.6g} vs s={s2:.6g}", gap, 4 * se, gap <= 4 * se + 1e-15))
    return rows


def _htransform_rows(problem, cfg) -> list:
    t, x = _verify_start(problem, cfg)
    T = problem.solution.terminal_time if problem.solution is not None else problem.horizon
    policy = optimal_policy(problem, cfg)
    r = vf.htransform_law_check(problem, (t, x), t + 0.5 * (T - t), cfg.mc.n_paths, cfg.grid.dt,
                                cfg.mc.master_seed, policy, use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    return [CheckRow("htransform", f"KS (n_eff={r.n_effective:.0f})", r.ks, r.threshold, r.passed)]


def _cost_rows(problem, cfg) -> list:
    t, x = _verify_start(problem, cfg)
    ref = float(problem.solution.v(t, x))
    r = vf.cost_of_policy(problem, optimal_policy(problem, cfg), (t, x), cfg.mc.n_paths, cfg.grid.dt,
                          cfg.mc.master_seed, reference=ref, use_bridge=cfg.mc.use_bridge, workers=cfg.mc.workers)
    tol = max(4 * r.estimate.std_error, 0.05 * abs(ref))
    gap = abs(r.estimate.mean - ref)
    return [CheckRow("cost", "|J - v|", gap, tol, gap <= tol + 1e-12)]


def run_checks(names, problem, cfg) -> list:
    if problem.solution is None:
        raise cfgmod.ConfigError("verify needs a problem with a closed-form solution")
    rows = []
    for name in names:
        if name in ("hjb", "pde"):
            rows += _residual_rows(name, problem)
        elif name == "theta":
            rows += _theta_rows(problem, cfg)
        elif name == "htransform":
            rows += _htransform_rows(problem, cfg)
        elif name == "cost":
            rows += _cost_rows(problem, cfg)
    return rows


def cmd_verify(cfg, args, out=None) -> int:
    if args.check != "all" and args.check not in CHECKS:
        raise cfgmod.ConfigError(f"unknown check {args.check!r}; expected one of {CHECKS} or 'all'")
    problem = cfgmod.build_problem(cfg)
    names = CHECKS if args.check == "all" else (args.check,)
    rows = run_checks(names, problem, cfg)
    failed = [r for r in rows if not r.passed]
    write_csv(cfg, "verify", ["check", "item", "measured", "bound", "passed"],
              [[r.check, r.item, r.measured, r.bound, r.passed] for r in rows],
              {"problem": problem.name, "failed": len(failed)}, out)
    for r in failed:
        print(f"FAIL {r.check}: {r.item} measured {r.measured:.6g} vs bound {r.bound:.6g}", file=sys.stderr)
    return EXIT_TOLERANCE if failed else EXIT_OK


# ----------------------------------------------------------------------------- entry point

COMMANDS = {"estimate": cmd_estimate, "grid": cmd_grid, "simulate": cmd_simulate, "cost": cmd_cost,
            "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON experiment config")
    common.add_argument("--problem", choices=cfgmod.BUILTIN_PROBLEMS, help="built-in problem (overrides config)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--paths", type=int, help="number of Monte Carlo paths")
    common.add_argument("--dt", type=float, help="Euler step")
    common.add_argument("--workers", type=int, help="worker threads (results do not depend on it)")
    common.add_argument("--no-bridge", action="store_true", help="disable the Brownian-bridge crossing test")
    common.add_argument("--clamp", type=float, help="cap on the control norm ('inf' disables)")
    common.add_argument("--out", metavar="PATH", help="also write the CSV to PATH")
    common.add_argument("--t", type=float, help="start time")
    common.add_argument("--x", help="start state, comma-separated")
    common.add_argument("--no-timestamp", action="store_true", help="omit the timestamp header line")

    parser = argparse.ArgumentParser(prog="constrained-control", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("estimate", parents=[common], help="Monte Carlo u and v at one point")
    g = sub.add_parser("grid", parents=[common], help="u and v on a lattice of points")
    g.add_argument("--t-values", help="comma-separated times")
    g.add_argument("--x-values", help="comma-separated values of the first state coordinate")
    sub.add_parser("simulate", parents=[common], help="optimally controlled trajectories")
    c = sub.add_parser("cost", parents=[common], help="Monte Carlo cost of a policy")
    c.add_argument("--policy", choices=("optimal", "zero", "inverse"), default="optimal")
    v = sub.add_parser("verify", parents=[common], help="run a verification check")
    v.add_argument("check", help=f"one of {', '.join(CHECKS)} or 'all'")
    return parser


def main(argv=None, out=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args, out)
    except (cfgmod.ConfigError, ExpressionError, geometry.DimensionMismatch, geometry.InvalidGeometry,
            est.PointOutsideC) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (est.AllPathsNonFinite, NonFiniteState, vf.DegenerateWeights) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
