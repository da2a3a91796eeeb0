"""Exception types shared across the package.

Each class maps to one CLI exit status (see ``featreplay.cli``).
"""

from __future__ import annotations


class ContractViolation(ValueError):
    """A caller broke an operation's precondition."""


class ConfigError(ValueError):
    """An experiment or replay configuration is invalid."""


class NumericFailure(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""

    def __init__(self, message: str, node=None, step: int | None = None, breakdown=None):
        super().__init__(message)
        self.node = node
        self.step = step
        self.breakdown = breakdown
