"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its stated preconditions.

    The message names the violated precondition; the CLI maps this to exit
    status 2.
    """


class UndefinedMetric(ValueError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""


class NonFiniteValue(ArithmeticError):
    """A computation produced NaN or infinity; surfaced eagerly at the op."""
