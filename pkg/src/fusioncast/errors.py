"""Exception types shared across the toolkit.

Every error carries a machine-parsable ``category`` so the CLI can emit a
single-line classification on failure.
"""


class ToolkitError(Exception):
    category = "internal"


class FormatError(ToolkitError):
    category = "format"


class OrderingError(ToolkitError):
    category = "ordering"


class InsufficientDataError(ToolkitError):
    category = "data"


class ArgumentError(ToolkitError):
    category = "argument"


class ConfigError(ToolkitError):
    category = "config"


class ShapeError(ToolkitError):
    category = "shape"


class TransportError(ToolkitError):
    """Backend/client transport failure. Carries retry metadata."""

    category = "transport"

    def __init__(self, message, attempts=1, retryable=True):
        super().__init__(message)
        self.attempts = attempts
        self.retryable = retryable


class TemplateError(ToolkitError):
    category = "template"

    def __init__(self, message, last_raw=None):
        super().__init__(message)
        self.last_raw = last_raw


class SummaryError(ToolkitError):
    category = "summary"

    def __init__(self, message, last_raw=None):
        super().__init__(message)
        self.last_raw = last_raw


class PredictionParseError(ToolkitError):
    category = "parse"


class PredictionLengthError(PredictionParseError):
    category = "parse-length"


class PredictionValueError(PredictionParseError):
    category = "parse-value"


class LeakageError(ToolkitError):
    category = "leakage"


class CompatibilityError(ToolkitError):
    category = "compatibility"


class IntegrityError(ToolkitError):
    category = "integrity"


class DependencyError(ToolkitError):
    """A CLI command was invoked before its upstream producer ran."""

    category = "dependency"

    def __init__(self, message, producer=None):
        super().__init__(message)
        self.producer = producer
