"""
Error types shared by every module.

Each error carries a short machine-readable code and a context dict so the
command line can emit it as JSON.
"""

from typing import Any, Dict


class RobustDPError(Exception):
    code = "error"

    def __init__(self, message: str, **context: Any):
        super().__init__(message)
        self.message = message
        self.context = context

    def to_dict(self) -> Dict[str, Any]:
        return {"error": self.code, "message": self.message, "context": self.context}


class ConfigError(RobustDPError):
    code = "config_error"


class TableParseError(RobustDPError):
    """Malformed table; context names the file, line and column."""

    code = "table_parse_error"


class DataValidationError(RobustDPError):
    code = "data_validation_error"


class DegenerateDataError(RobustDPError):
    code = "degenerate_data"


class DimensionMismatchError(RobustDPError):
    code = "dimension_mismatch"


class BoundsViolationError(RobustDPError):
    """Data outside the bounds the privacy guarantee was calibrated for."""

    code = "bounds_violation"


class BudgetError(RobustDPError):
    code = "budget_error"


class SamplerError(RobustDPError):
    code = "sampler_error"


class InsufficientSamplesError(RobustDPError):
    code = "insufficient_samples"


class RepeatFailedError(RobustDPError):
    code = "repeat_failed"


class ReleaseConflictError(RobustDPError):
    code = "release_conflict"


class FileAccessError(RobustDPError):
    """An input or output path could not be opened."""

    code = "file_access_error"
