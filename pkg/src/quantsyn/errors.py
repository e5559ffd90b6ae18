"""Exception types shared across the toolchain."""


class QuantsynError(Exception):
    """Base class for all toolchain errors."""


class ContractError(QuantsynError, ValueError):
    """An input violated an operation's contract."""


class ConfigError(QuantsynError, ValueError):
    """Inconsistent or incomplete configuration."""


class NumericalBlowupError(QuantsynError, ArithmeticError):
    """Integration produced a non-finite state."""

    def __init__(self, message, x=None, u=None):
        super().__init__(message)
        self.x = x
        self.u = u


class UnrealizableError(QuantsynError, RuntimeError):
    """An operation required a non-empty controller domain."""


class SafetyViolationError(QuantsynError, RuntimeError):
    """Closed-loop trajectory left the controller domain."""

    def __init__(self, message, step: int):
        super().__init__(message)
        self.step = step
