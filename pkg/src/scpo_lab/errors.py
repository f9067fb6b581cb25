"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation accepts."""


class ConfigError(ValueError):
    """A run or environment configuration is invalid."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite intermediate."""


class SolverError(ArithmeticError):
    """The trust-region solver cannot produce a step.

    ``diagnostics`` carries whatever state helps reproduce the failure.
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
