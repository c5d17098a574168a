"""Risk-sensitive optimal control of reflected diffusions in the orthant.

Numerical pipeline: constrained Euler-Maruyama simulation, a discounted
risk-sensitive HJB solver marched in the risk parameter with oblique
boundary conditions, the vanishing-discount limit producing the ergodic
value and an optimal stationary policy, a recurrence probe, and Monte Carlo
cross-checks of every analytic object.
"""

from .domain import (ActionSpace, CoefficientField, ModelSpec, OrthantDomain,
                     canonical_model_1d, canonical_model_2d, check_ellipticity,
                     check_reflection_angle, cost_relaxed, drift_relaxed,
                     make_coefficients)
from .sde import (ControlPolicy, PathBundle, simulate_batch, simulate_path,
                  skorokhod_step)
from .errors import (ConfigurationError, InterpolationError, OrthriskError,
                     SimulationError, SolverError, ValidationError)
from .rng import split64

__all__ = [
    "ActionSpace", "CoefficientField", "ModelSpec", "OrthantDomain",
    "canonical_model_1d", "canonical_model_2d", "check_ellipticity",
    "check_reflection_angle", "cost_relaxed", "drift_relaxed",
    "make_coefficients", "ControlPolicy", "PathBundle", "simulate_batch",
    "simulate_path", "skorokhod_step", "ConfigurationError",
    "InterpolationError", "OrthriskError", "SimulationError", "SolverError",
    "ValidationError", "split64",
]
