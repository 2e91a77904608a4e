"""Exception and warning types shared across the package."""


class D2DCacheError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(D2DCacheError, ValueError):
    """Invalid scenario parameters or malformed scenario file."""


class DomainError(D2DCacheError, ValueError):
    """Argument outside the mathematical domain of a function."""


class BracketError(D2DCacheError, ValueError):
    """Root-finding bracket does not enclose a sign change."""


class NumericError(D2DCacheError, ArithmeticError):
    """Non-finite value met during a numerical computation."""


class SolverError(D2DCacheError, RuntimeError):
    """An optimizer failed to produce a solution."""


class DiagnosticWarning(UserWarning):
    """A value was clamped or replaced by a sentinel."""
