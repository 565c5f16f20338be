"""Numerical homogenization of reaction-diffusion with strong nonlinear drift
on periodically perforated domains."""

from .geometry import CellGeometry, build_cell_grid, build_micro_domain
from .coefficients import Bump, CoefficientSet, sample_coefficients, project_zero_mean_BC, \
    verify_assumptions
from .cell_solver import solve_corrector, solve_periodic_poisson
from .effective import assemble_Dstar, compute_Bstar, eval_Dstar, tabulate_Dstar
from .macro_solver import run_macro, step_macro
from .micro_solver import MicroProblem, run_micro, step_micro, shift_to_moving_frame
from .harness import RunConfig, build_effective_model, load_config, run_convergence_study

__all__ = [
    "CellGeometry", "build_cell_grid", "build_micro_domain", "Bump", "CoefficientSet",
    "sample_coefficients", "project_zero_mean_BC", "verify_assumptions", "solve_corrector",
    "solve_periodic_poisson", "assemble_Dstar", "compute_Bstar", "eval_Dstar", "tabulate_Dstar",
    "run_macro", "step_macro", "MicroProblem", "run_micro", "step_micro",
    "shift_to_moving_frame", "RunConfig", "load_config", "build_effective_model", "run_convergence_study",
]
__version__ = "0.1.0"
