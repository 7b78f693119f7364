"""Derivatives of solution maps of proximal-gradient solvable problems."""

from .core import fit_linear_rate, glfpi_run, spectral_radius
from .problems import ParamPack, ProblemInstance, group_lasso_problem, lasso_problem
from .solver import SolverConfig, apg_solve, pgd_solve
from .autodiff import (
    ad_forward,
    ad_reverse,
    build_anchor,
    fpad_forward,
    fpad_reverse,
    implicit_diff,
)

__version__ = "0.1.0"

__all__ = [
    "fit_linear_rate",
    "glfpi_run",
    "spectral_radius",
    "ParamPack",
    "ProblemInstance",
    "lasso_problem",
    "group_lasso_problem",
    "SolverConfig",
    "apg_solve",
    "pgd_solve",
    "ad_forward",
    "ad_reverse",
    "build_anchor",
    "fpad_forward",
    "fpad_reverse",
    "implicit_diff",
]
