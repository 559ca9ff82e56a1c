"""
Exception hierarchy for the report labeler.

Everything raised on purpose derives from ReportLabelerError, which the CLI
turns into exit code 1. Anything else is an internal error (exit code 2).
"""

from typing import List, Optional


class ReportLabelerError(ValueError):
    """Base class for user, data and configuration errors"""


class FormatError(ReportLabelerError):
    """A cell or file does not follow the on-disk format"""

    def __init__(self, message: str, column: Optional[str] = None, row: Optional[int] = None):
        self.column = column
        self.row = row
        location = []
        if row is not None:
            location.append(f"row {row}")
        if column is not None:
            location.append(f"column '{column}'")
        if location:
            message = f"{message} ({', '.join(location)})"
        super().__init__(message)


class SchemaError(ReportLabelerError):
    """A label vector violates the label-space constraints"""

    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("Invalid label vector: " + "; ".join(self.violations))


class SizeError(ReportLabelerError):
    """Not enough items for the requested operation"""


class ShapeError(ReportLabelerError):
    """Tensor or batch shapes do not match the model contract"""


class ConfigError(ReportLabelerError):
    """Inconsistent or unknown configuration"""


class DataError(ReportLabelerError):
    """Training data is missing or empty"""


class TranslationError(ReportLabelerError):
    """The translation client failed"""


class LengthError(ReportLabelerError):
    """Prediction and gold sequences differ in length"""


class AllUndefinedError(ReportLabelerError):
    """No condition has a defined score"""


class AlignmentError(ReportLabelerError):
    """Label sets do not cover the same reports in the same order"""


class ManifestError(ReportLabelerError):
    """A checkpoint manifest is missing or incompatible"""
