"""Exception hierarchy with stable error codes and actionable messages.

Every user-facing error states the violated constraint, the observed facts,
and at least one concrete solution. The CLI maps exception classes to exit
codes (usage 2, data 3, training 4).
"""


class GroveError(Exception):
    """Base class for all toolkit errors."""

    code = "error"

    def __init__(self, message: str, code: str | None = None):
        super().__init__(message)
        if code is not None:
            self.code = code


class UsageError(GroveError):
    """Invalid invocation: bad flags, unknown keys, malformed config."""

    code = "usage"


class DataError(GroveError):
    """Unreadable or inconsistent dataset/dataspec input."""

    code = "data"


class TrainingError(GroveError):
    """Invalid training configuration or unlearnable setup."""

    code = "training"


class SerializationError(GroveError):
    """Corrupt, truncated, or too-new serialized artifact."""

    code = "serialization"
