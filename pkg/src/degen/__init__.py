"""Hörmander-degeneracy analysis and exit-time Monte Carlo for Dirichlet problems."""

from .expr import Expression, diff, evaluate, parse
from .problem import Problem, ProblemError, fixture_path, load_problem
from .sde_mc import Estimate, PathConfig, estimate_grid, estimate_point, simulate_to_exit
from .vf_algebra import VectorField, classify_K, enumerate_brackets, lambda_k, lie_bracket

__version__ = "0.1.0"
