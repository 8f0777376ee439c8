"""Iterative-regularization proximal gradient methods for simple bilevel problems."""

from .errors import (
    BacktrackingError,
    ConfigurationError,
    DomainError,
    EstimationError,
    IreError,
    NumericalError,
    WindowError,
)
from .model import BilevelProblem, ReferenceSolution, RegularizationSchedule, make_phi_k, validate
from .prox_core import (
    CompositeFunction,
    ProxOracle,
    SmoothOracle,
    backtrack,
    operator_norm,
    pg_step,
    prox_box,
    prox_l1,
    project_ball,
    half_sq_dist_affine,
    sum_bound_check,
)
from .solvers import (
    FistaSequence,
    SolverConfig,
    SolverTrace,
    StepRule,
    best_iterate,
    ergodic_weights_apg,
    ire_apg,
    ire_pg,
    solve,
)
from .bounds import check_rate_bounds
from .surrogate import LiftedProblem, lift, lift_matrix, translate_rates
from .experiments import InstanceSpec, gen_instance, reference_solve

__version__ = "0.1.0"
