"""Exception types shared across the package."""

from .numerics import NumericError, ShapeError


class ConfigError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


__all__ = ["ConfigError", "ContractError", "NumericError", "ShapeError"]
