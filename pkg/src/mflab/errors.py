"""Exception types shared across the package."""


class UsageError(ValueError):
    """Caller passed arguments that do not fit together (shapes, spaces, ranges)."""


class InvariantError(ValueError):
    """A value violates one of its type invariants beyond the repair tolerance."""


class ConfigurationError(ValueError):
    """A run configuration cannot be executed as specified."""


class InternalError(RuntimeError):
    """Numerical backend failed on input that should always be solvable."""
