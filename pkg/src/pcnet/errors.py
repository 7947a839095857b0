"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """An argument violates an operation's precondition."""


class InvalidTemplateError(InvalidInputError):
    """A prompt template is missing one of its parts."""


class DegenerateInputError(ValueError):
    """Input is well-formed but admits no meaningful answer (e.g. no valid proposals)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """Configuration or checkpoint is malformed or incompatible."""
