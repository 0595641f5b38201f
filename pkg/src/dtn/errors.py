"""Exception hierarchy shared by every dtn module."""


class DtnError(Exception):
    """Base class for all dtn errors."""


class DimensionError(DtnError, ValueError):
    """Operand shapes are incompatible with an operation."""


class DegenerateBatchError(DimensionError):
    """Batch statistics requested on a batch that is too small."""


class ParameterError(DtnError, ValueError):
    """A scalar hyperparameter is outside its valid range."""


class NumericError(DtnError, ArithmeticError):
    """A NaN or Inf appeared in a forward or backward value."""


class GraphError(DtnError, RuntimeError):
    """The recorded computation graph is malformed."""


class ContractError(DtnError, RuntimeError):
    """An API precondition was violated by the caller."""


class CheckpointError(DtnError, IOError):
    """A checkpoint could not be loaded or does not match its model."""


class ConfigError(DtnError, ValueError):
    """A run or model configuration is invalid."""


class MetricError(DtnError, ValueError):
    """A metric is undefined for the given inputs."""
