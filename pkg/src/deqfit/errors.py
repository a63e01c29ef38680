"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A request is malformed: unknown name, mismatched shapes, invalid grid."""


class NumericalDomainError(ArithmeticError):
    """Evaluation left the numerical domain (singularity, overflow, solver failure)."""
