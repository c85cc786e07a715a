"""Exception hierarchy.

Each error carries the process exit code the CLI maps it to:
2 for configuration problems, 3 for data problems, 4 for numeric failures.
"""


class GanomalyError(Exception):
    exit_code = 1


class ConfigError(GanomalyError, ValueError):
    exit_code = 2


class ShapeError(ConfigError):
    """Tensor shape does not match the architecture or its partner argument."""


class ContractError(ConfigError):
    """An operation was called on data missing a required field."""


class DataError(GanomalyError):
    exit_code = 3


class FormatError(DataError, ValueError):
    pass


class ConsistencyError(DataError, ValueError):
    pass


class DataIOError(DataError, OSError):
    pass


class EmptyClassError(DataError, ValueError):
    pass


class NoNormalDataError(DataError, ValueError):
    pass


class SingleClassError(DataError, ValueError):
    """AUC or a per-class computation needs both labels present."""


class CheckpointError(DataError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class LabelDependentError(GanomalyError, RuntimeError):
    """A label-dependent score set was passed to a deployment-facing operation."""

    exit_code = 2


class NumericError(GanomalyError, ArithmeticError):
    exit_code = 4


class DegenerateRangeError(NumericError):
    pass


class PartitionError(NumericError):
    pass
