"""Fraction of optimally controlled Euler paths that enter D, as a function of dt."""

import argparse
import math

from constrained_control import oracles, verify
from constrained_control import estimator as est
from constrained_control import policy as pol

STARTS = {"example1": -1.5, "example2": 0.2, "example3": 0.0}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--dts", default="0.01,0.005,0.0025")
    ap.add_argument("--no-bridge", action="store_true")
    args = ap.parse_args()
    dts = [float(v) for v in args.dts.split(",")]
    print("problem,dt,violation_fraction,se,violation_over_sqrt_dt")
    for name, x0 in STARTS.items():
        sol = oracles.REGISTRY[name](1.0)
        problem = est.ProblemSpec.from_solution(sol)
        policy = pol.alpha_star_closed_form(sol, clamp_max=1e4)
        for dt in dts:
            r = verify.cost_of_policy(problem, policy, (0.0, x0), args.paths, dt, args.seed,
                                      use_bridge=not args.no_bridge)
            p = r.violation_fraction
            se = math.sqrt(p * (1 - p) / args.paths)
            print(f"{name},{dt},{p:.5f},{se:.5f},{p / math.sqrt(dt):.4f}")


if __name__ == "__main__":
    main()
