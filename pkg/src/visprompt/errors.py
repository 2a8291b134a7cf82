"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """Input is empty, zero-norm, or otherwise degenerate."""


class ContractError(ValueError):
    """A documented precondition was violated."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
