"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: config errors exit 2,
data errors exit 3, numerical failures exit 4.
"""


class ShapeError(ValueError):
    """Operand shapes are inconsistent with an operation's contract."""


class ContractError(RuntimeError):
    """An API precondition was violated (non-scalar loss, double backward, ...)."""


class ConfigError(ValueError):
    """A model/run configuration is invalid."""


class DataError(ValueError):
    """Dataset files are missing, malformed, or labels are out of range."""


class NumericsError(ArithmeticError):
    """A non-finite value was detected where finite math was required."""
