"""Exception types shared across the package."""


class RejectedInputError(ValueError):
    """Input data has the wrong shape, range or content."""


class RejectedParameterError(ValueError):
    """A hyperparameter or configuration value is out of its valid range."""


class ConfigError(ValueError):
    """An experiment configuration file is malformed or inconsistent."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during a forward or backward pass."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer
