"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration (CLI exit code 2)."""


class UsageError(ValueError):
    """An operation was called with arguments violating its contract."""


class NumericalError(ArithmeticError):
    """Zero-probability conditioning or an exhausted attempt budget (CLI exit code 3)."""
