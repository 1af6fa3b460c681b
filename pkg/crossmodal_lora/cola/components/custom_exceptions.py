"""Custom Exceptions and Errors raised by modules in the Cross-Modal LoRA application"""


class ColaError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(ColaError, ValueError):
    """Raised when tensor extents disagree with what an operation requires"""


class ConfigurationError(ColaError, ValueError):
    """Raised when a configuration value is out of range or unsupported"""


class UsageError(ColaError, RuntimeError):
    """Raised when an operation is called in a state that does not support it"""


class NumericError(ColaError, ArithmeticError):
    """
    Raised when a computation produces NaN or Inf.
    `node` names the first non-finite tensor in graph order, when known.
    """

    def __init__(self, message: str, node: str | None = None) -> None:
        super().__init__(message)
        self.node = node


class ExperimentConfigError(ConfigurationError):
    """Raised when an experiment config file is missing, malformed or holds unknown keys"""

    def __init__(
        self,
        message: str,
        path: str | None = None,
        key: str | None = None,
        line: int | None = None,
    ) -> None:
        super().__init__(message)
        self.path = path
        self.key = key
        self.line = line


class CheckpointError(ColaError):
    """Raised when a checkpoint container has the wrong version or mismatching keys"""


class VerificationError(ColaError):
    """Raised when the gradient check exceeds its tolerance"""

    def __init__(self, message: str, failed: list[str] | None = None) -> None:
        super().__init__(message)
        self.failed = failed or []
