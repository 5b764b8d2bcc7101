"""
Custom exceptions for the application.

Provides a hierarchy of exceptions with process exit code mapping
for consistent error handling across the command-line surface.
"""

from typing import Any, Dict, Optional


class CardioSegError(Exception):
    """Base exception for all application errors."""

    exit_code: int = 1
    detail: str = "An unexpected error occurred"

    def __init__(self, detail: Optional[str] = None):
        self.detail = detail or self.__class__.detail
        super().__init__(self.detail)


class ArgumentError(CardioSegError):
    """Raised when an operation receives arguments outside its contract."""

    exit_code = 2
    detail = "Invalid argument"


class ConfigurationError(CardioSegError):
    """Raised when there's a configuration issue."""

    exit_code = 3
    detail = "Configuration error"


class DatasetFormatError(CardioSegError):
    """Raised when a dataset directory or manifest cannot be parsed."""

    exit_code = 4
    detail = "Malformed dataset directory"


class DatasetIntegrityError(CardioSegError):
    """Raised when dataset contents violate slice invariants."""

    exit_code = 4
    detail = "Dataset integrity check failed"


class TransferError(CardioSegError):
    """Raised when encoder weights cannot be transferred to a target layout."""

    exit_code = 5
    detail = "Incompatible encoder weights"


class WeightsImportError(CardioSegError):
    """Raised when external weights do not match the expected variant."""

    exit_code = 5
    detail = "Failed to import external weights"


class CorruptCheckpointError(CardioSegError):
    """Raised when a checkpoint cannot be read or fails its digest check."""

    exit_code = 6
    detail = "Checkpoint is corrupt"


class ContractError(CardioSegError):
    """Raised when two weight sets that must align do not."""

    exit_code = 7
    detail = "Weight name sets do not match"


class NumericGuardError(CardioSegError):
    """Raised when a numeric precondition (e.g. non-zero norm) is violated."""

    exit_code = 8
    detail = "Numeric guard triggered"


class TrainingDivergedError(CardioSegError):
    """Raised when a training step produces a non-finite loss."""

    exit_code = 8
    detail = "Training diverged"

    def __init__(self, detail: Optional[str] = None, snapshot: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.snapshot = snapshot or {}


class RefusalError(CardioSegError):
    """Raised when a command refuses to overwrite existing artifacts."""

    exit_code = 9
    detail = "Refusing to overwrite existing output"
