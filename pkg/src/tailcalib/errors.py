"""Exception types shared across the package.

The CLI maps these onto exit codes: I/O trouble (OSError, CorruptionError)
exits 1, validation problems (ValidationError and subclasses, FormatError)
exit 2, numerical failures exit 3.
"""


class TailCalibError(Exception):
    """Base class for every error raised by this package."""


class FormatError(TailCalibError):
    """File is not a recognized binary format (bad magic or version)."""


class CorruptionError(TailCalibError):
    """Header and payload disagree: truncated or padded byte stream."""


class ValidationError(TailCalibError):
    """Inputs violate a documented precondition or invariant."""


class DomainError(ValidationError):
    """A value is outside the mathematical domain of an operation."""


class NumericalError(TailCalibError):
    """A numerical routine failed beyond its recoverable tolerances."""
