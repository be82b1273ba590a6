# core/errors.py
from typing import Dict, Optional


class ProtoPatchError(Exception):
    """Base class for every failure the pipeline reports to the user"""

    exit_code = 1


class ConfigError(ProtoPatchError):
    exit_code = 2


class ShapeError(ProtoPatchError, ValueError):
    exit_code = 2


class ContractViolation(ProtoPatchError):
    exit_code = 2


class DataError(ProtoPatchError):
    exit_code = 3


class FormatError(DataError):
    """Checkpoint container is malformed; `field` names the offending entry"""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class NumericFailure(ProtoPatchError):
    exit_code = 4

    def __init__(self, message: str, node: Optional[str] = None,
                 breakdown: Optional[Dict[str, float]] = None):
        super().__init__(message)
        self.node = node
        self.breakdown = breakdown or {}


class EvaluationError(ProtoPatchError):
    exit_code = 4
