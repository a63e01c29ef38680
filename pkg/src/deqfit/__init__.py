"""deqfit: ODE parameter estimation with discretization-error quantification.

Fits ODE models to noisy observations while estimating, from the same data,
how much of the misfit is due to the numerical integrator rather than the
observation noise. The estimator alternates an order-constrained
(isotonic-regression) update of per-observation error variances with a
weighted least-squares parameter update driven by exact discrete-adjoint
gradients.
"""

from .adjoint import backward_tableau, fd_gradient, wls_gradient
from .errors import ConfigurationError, NumericalDomainError
from .estimate import (DataGenConfig, FitOptions, FitProblem, FitResult,
                       ObservationSet, generate_data, irls, objective_g,
                       probabilistic_weight_estimate, qml_fit, residuals,
                       trajectory_error, wls_fit)
from .inference import (ConfidenceInterval, HoAnalysis, ProfilePoint,
                        ho_analysis, ho_bias, ho_mse, likelihood_ratio_ci,
                        profile_loglik, rotation_matrix)
from .integrate import (SCHEMES, NumericalSolution, Scheme, TimeGrid,
                        get_scheme, ho_step_matrix, integrate,
                        integrate_reference, step)
from .isotonic import IsotonicResult, WeightMatrix, gcm_slopes, update_weights
from .models import (OdeModel, TRUE_PARAMS, augment_with_parameters, builtin,
                     eval_rhs, eval_state_jacobian, kepler_energy)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "NumericalDomainError",
    "OdeModel", "TRUE_PARAMS", "builtin", "eval_rhs", "eval_state_jacobian",
    "augment_with_parameters", "kepler_energy",
    "Scheme", "SCHEMES", "get_scheme", "TimeGrid", "NumericalSolution",
    "step", "integrate", "integrate_reference", "ho_step_matrix",
    "backward_tableau", "wls_gradient", "fd_gradient",
    "IsotonicResult", "WeightMatrix", "gcm_slopes", "update_weights",
    "ObservationSet", "DataGenConfig", "FitOptions", "FitResult", "FitProblem",
    "residuals", "objective_g", "wls_fit", "qml_fit", "irls",
    "probabilistic_weight_estimate", "generate_data", "trajectory_error",
    "ProfilePoint", "ConfidenceInterval", "HoAnalysis",
    "profile_loglik", "likelihood_ratio_ci", "ho_bias", "ho_mse", "ho_analysis",
    "rotation_matrix",
]
