"""
STADB Fehlerklassen
===================
Every domain error knows the CLI exit code it maps to:

  1  usage
  2  configuration
  3  ingestion / persistence
  4  gradient check above tolerance
"""

from typing import Optional


class StadbError(Exception):
    kind = "error"
    exit_code = 1


class DimensionError(StadbError, ValueError):
    """Tensor extents do not fit the operation."""
    kind = "dimension"


class ContractError(StadbError, ValueError):
    """A precondition of an operation was violated."""
    kind = "contract"


class ConfigError(StadbError):
    kind = "config"
    exit_code = 2

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IngestionError(StadbError):
    kind = "ingestion"
    exit_code = 3

    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)


class PersistenceError(StadbError):
    kind = "persistence"
    exit_code = 3


class BadMagicError(PersistenceError):
    kind = "bad_magic"


class UnsupportedVersionError(PersistenceError):
    kind = "unsupported_version"


class ChecksumError(PersistenceError):
    kind = "checksum"


class TruncatedCheckpointError(PersistenceError):
    kind = "truncated"


class EvaluationError(ContractError):
    """No relevant gallery entry for a query, or for any query."""
    kind = "evaluation"


class GradcheckFailure(StadbError):
    kind = "gradcheck"
    exit_code = 4
