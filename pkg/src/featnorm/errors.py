"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes do not satisfy an operation's requirements."""


class ContractError(ValueError):
    """An operation was called with arguments that violate its contract."""


class ConfigurationError(ValueError):
    """A scenario or experiment configuration is invalid."""
