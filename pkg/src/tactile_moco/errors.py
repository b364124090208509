"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A call-site precondition was violated."""


class StateError(RuntimeError):
    """An object is not in a state that permits the requested call."""


class DegenerateFeatureError(ArithmeticError):
    """A feature row is (numerically) the zero vector."""


class ConfigError(ValueError):
    """A configuration value is out of its allowed range."""


class FormatError(ValueError):
    """A file or record does not follow its declared format."""
