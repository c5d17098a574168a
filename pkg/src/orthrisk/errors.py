"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ValidationError/ConfigurationError -> 1,
SolverError/SimulationError -> 2, verification FAIL -> 3.
"""


class OrthriskError(Exception):
    """Base class for all package errors."""


class ValidationError(OrthriskError):
    """Bad input value (non-normalized weights, point outside the orthant, ...)."""


class ConfigurationError(OrthriskError):
    """Config-level problem: unknown key, range violation, CFL violation."""


class SimulationError(OrthriskError):
    """Path simulation failure (reflection loop did not terminate, NaN drift)."""


class SolverError(OrthriskError):
    """PDE solve failure (non-positive slice, sweep iteration did not converge)."""


class InterpolationError(OrthriskError):
    """Requested point is outside the tabulated field (theta below the floor)."""
