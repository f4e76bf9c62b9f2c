"""Monte Carlo toolkit for state-constrained stochastic control.

The value function of a diffusion control problem with a forbidden
space-time set ``D`` is ``v = -2 ln u``, where ``u`` is a killed
expectation of the uncontrolled diffusion.  The package estimates ``u``,
builds the optimal feedback control from it and checks the theory's
consequences numerically.
"""

from .dynamics import CoefficientField, TimeGrid, simulate_paths
from .estimator import CostSpec, Estimate, ProblemSpec, estimate_grad_u, estimate_u
from .policy import FeedbackPolicy, alpha_star_closed_form, alpha_star_mc, clamp, value_from_u

__all__ = [
    "CoefficientField",
    "CostSpec",
    "Estimate",
    "FeedbackPolicy",
    "ProblemSpec",
    "TimeGrid",
    "alpha_star_closed_form",
    "alpha_star_mc",
    "clamp",
    "estimate_grad_u",
    "estimate_u",
    "simulate_paths",
    "value_from_u",
]
