"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A shape, parameter, or config value violates a declared precondition."""


class NumericError(ValueError):
    """An input or computed quantity is non-finite where finiteness is required."""


class ContractViolationError(RuntimeError):
    """A runtime contract was broken, e.g. a frozen classifier head was mutated."""
