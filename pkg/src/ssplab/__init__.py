"""Regret laboratory for stochastic shortest path learners with linear function approximation."""

from .env import (FiniteHorizonView, LinearMixtureSsp, LinearSsp, TabularSsp, TerminalCost, fh_wrap,
                  make_gap_example, make_lower_bound_instance, make_mixture_fixture, make_two_route, perturb_costs,
                  tabular_to_linear, tabular_to_mixture, two_B_star, validate, zero)
from .oracle import solve_fh, solve_ssp
from .reduction import ReductionConfig, compute_regret, run_fha, run_fha_pf, run_fha_restart

__version__ = "0.1.0"
