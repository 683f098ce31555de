"""Exception types shared across the package."""


class WeightLoRAError(Exception):
    """Base class for all package errors."""


class DimensionError(WeightLoRAError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(WeightLoRAError, ValueError):
    """An argument violates an operation's precondition."""


class StateError(WeightLoRAError, RuntimeError):
    """An object is in the wrong state for the requested operation."""


class DegeneracyError(WeightLoRAError, ArithmeticError):
    """A numerical construction is ill-posed (rank deficiency, empty selection)."""
