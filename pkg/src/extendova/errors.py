"""Exception taxonomy shared across the package.

Plain ``ValueError`` is used for malformed arguments (wrong shapes, bad
ranges).  The classes below cover the remaining failure kinds so tests can
assert on them precisely.
"""


class ConfigError(ValueError):
    """Raised when a config file or config dataclass fails validation."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but numerically unusable (e.g. a zero
    vector where a direction is required)."""


class NumericalFailure(ArithmeticError):
    """A computation produced non-finite values."""


class StateError(RuntimeError):
    """Operation called on an object in the wrong lifecycle state."""


class InvariantViolation(RuntimeError):
    """An internal consistency check failed.  Always a bug."""
