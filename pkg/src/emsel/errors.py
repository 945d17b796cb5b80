"""Exception hierarchy shared across the package.

ValidationError maps to CLI exit code 2, NumericalError to exit code 3.
"""


class EmselError(Exception):
    """Base class for all package errors."""


class ValidationError(EmselError):
    """Bad inputs: malformed files, inconsistent shapes, invalid configuration."""


class NumericalError(EmselError):
    """Numerical failure: rank deficiency, non-convergence, infeasible geometry."""
