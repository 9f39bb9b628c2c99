"""Exception taxonomy shared by all layers of the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericDomainError(ValueError):
    """An input carries NaN/Inf where a finite value is required."""


class ContractError(RuntimeError):
    """A documented precondition of an operation was violated."""


class ConfigError(ValueError):
    """Experiment configuration is malformed or out of domain."""


class GraphParseError(ValueError):
    """A GraphJSON document violates the schema; message names the field path."""


class GraphValidationError(ValueError):
    """A structurally valid document violates a Graph invariant."""


class TrainingDivergenceError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"non-finite loss at epoch {epoch}")
