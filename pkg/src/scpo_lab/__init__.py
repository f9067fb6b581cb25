"""State-wise constrained policy optimization on desk-scale navigation tasks."""

from scpo_lab.errors import ConfigError, DomainError, NumericError, SolverError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DomainError", "NumericError", "SolverError", "__version__"]
