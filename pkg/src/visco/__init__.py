"""Quasistatic Kelvin-Voigt viscoelastic solids with global injectivity and self-contact."""

from .ciarlet_necas import (OverlapPenalty, OverlapPenaltyParams, cn_excess, cn_report,
                            contact_report, det_integral, image_measure, overlap_penalty,
                            self_contact_set)
from .config import RunConfig, load_config, parse_config, serialize
from .diagnostics import (energy_report, korn_quotient, reaction_traction,
                          traction_support_check, weak_residual)
from .errors import (BarrierError, ConfigError, ConstraintInfeasibleError, DomainError,
                     NonConvergenceError, ResolutionError)
from .grid import DeformationField, ReferenceGrid, affine_field, identity_field, interpolate_map
from .loads import LoadSpec
from .materials import MaterialModel
from .scenarios import scenario
from .stepper import SolverOptions, StepProblem, Trajectory, minimize_step, run

__version__ = "0.1.0"
