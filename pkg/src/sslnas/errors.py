"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all engine errors."""


class DomainError(EngineError, ValueError):
    """A precondition on an operation's inputs was violated."""


class StructureError(EngineError, ValueError):
    """A composite object (architecture, tensor batch) is malformed."""


class ParseError(EngineError, ValueError):
    """A serialized document could not be parsed.

    ``path`` names the offending field (e.g. ``cells[3].op.kernel``) when
    the failure is field-level rather than syntactic.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class CheckpointError(EngineError, RuntimeError):
    """A checkpoint failed an integrity check or could not be restored."""


class DataError(EngineError, RuntimeError):
    """A dataset could not be loaded or is unusable."""


class ConfigError(EngineError, ValueError):
    """A manifest or configuration document is invalid."""
