"""Numerics for parabolic-elliptic chemotaxis with heterogeneous logistic source.

    u_t = Δu - χ∇·(u∇v) + u(a(x,t) - b(x,t)u),   0 = Δv - λv + μu

on a periodic box in one or two dimensions.
"""

from .model import (CoefficientField, HypothesisError, HypothesisReport, Params, attraction_rectangle,
                    sample_coefficient, sup_bound, validate_coefficients)
from .fields import Grid, ScalarField, VectorField
from .elliptic import gradient, solve_helmholtz
from .evolve import (BlowupDetected, InsufficientStates, PositivityLoss, State, Trajectory, integrate,
                     mild_residual, step)
from .oracles import (BoundsReport, SpreadingReport, comparison_envelopes, dirichlet_principal_eigenvalue,
                      pointwise_lower_bound, remark12_bound, spreading_speeds)
from .entire import (EntireSolution, certify_entire_bounds, find_periodic_entire_solution, find_steady_state,
                     pullback_entire_solution)
from .analysis import (BoxTooSmall, NoFront, PerturbationReport, StabilityReport, chi0_surrogate,
                       contraction_factor, fit_decay_rate, front_speed, perturbation_study, ratio_series,
                       staircase_check)

__version__ = "0.1.0"
