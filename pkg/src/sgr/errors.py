"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: dataset/serialization/graph problems
are data-validation failures (exit 2), provider and transport problems are
exit 3, anything argparse-level is usage (exit 1).
"""


class SgrError(Exception):
    """Base class for all package errors."""


class GraphError(SgrError):
    """Structural misuse of the scene graph (layer mismatch, bad edge, ...)."""


class SerializationError(SgrError):
    """Canonical graph text could not be parsed or violated the schema."""

    def __init__(self, message: str, position: int | None = None):
        super().__init__(message if position is None else f"{message} (at byte {position})")
        self.position = position


class DatasetError(SgrError):
    """Dataset manifest or frame record failed validation."""


class ProviderError(SgrError):
    """A model provider rejected a request or returned an unusable result."""


class TransportError(ProviderError):
    """Remote provider could not be reached; carries the attempt count."""

    def __init__(self, message: str, attempts: int = 1):
        super().__init__(f"{message} (after {attempts} attempt{'s' if attempts != 1 else ''})")
        self.attempts = attempts


class TaskParseError(SgrError):
    """Task-planning model never produced a parseable plan.

    ``raw_responses`` keeps every response received, in order, so the
    failure can be inspected and replayed.
    """

    def __init__(self, message: str, raw_responses: list[str]):
        super().__init__(message)
        self.raw_responses = list(raw_responses)
