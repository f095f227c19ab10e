"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


class NumericError(ArithmeticError):
    """A non-finite value was produced.

    ``op`` names the operation (or tensor) where it first appeared.
    """

    def __init__(self, op: str, detail: str = ""):
        self.op = op
        msg = f"non-finite value produced by {op}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class ExpressionError(ValueError):
    """Malformed arithmetic expression; ``position`` is the 0-based offset."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(f"{message} at position {position}")


class ConfigError(ValueError):
    """Invalid run configuration."""
