"""Particle solvers and verification tools for McKean-Vlasov forward-backward
systems, their decoupling fields and the associated master equations."""

from . import control, fbsde, lions, lq_oracle, master, measure, scenario  # noqa: F401
from .errors import (
    BlowUpError,
    ConvergenceError,
    IllConditionedBasisError,
    InvalidInputError,
    InvalidSpecError,
    MkvError,
    NumericDomainError,
    OffSupportError,
    OracleBlowUpError,
)
from .fbsde import InitialLawSpec, SolverParams, solve_long_horizon, solve_small_time
from .lions import lions_derivative, lions_second_diag
from .lq_oracle import LqSpec, solve_riccati
from .master import master_residual
from .measure import EmpiricalMeasure, w2_distance
from .scenario import build_scenario

__version__ = "0.1.0"
