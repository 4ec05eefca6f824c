"""Exception hierarchy shared by all modules.

Each class carries the CLI exit code it maps to.
"""


class QKError(Exception):
    exit_code = 1


class ConfigError(QKError, ValueError):
    exit_code = 2


class DataError(QKError):
    exit_code = 3


class ShapeError(DataError, ValueError):
    """Input dimensions do not match what the layer/model expects."""


class FormatError(DataError):
    """On-disk file is malformed or inconsistent with its header."""


class DegenerateInputError(DataError, ValueError):
    pass


class UndefinedMetricError(DataError, ValueError):
    pass


class ContractError(QKError, RuntimeError):
    """A precondition between cooperating components was violated
    (stale store, trainable backbone at bulk-evaluation time, role mismatch)."""

    exit_code = 3


class NumericError(QKError, FloatingPointError):
    exit_code = 4


class RankError(DataError, ValueError):
    pass


class HalfRangeError(DataError, OverflowError):
    """Value does not fit in IEEE binary16."""


class MappingError(DataError, ValueError):
    """Positive-pair map refers to a database column that does not exist."""
