"""Exception hierarchy shared by every camtraj module.

The CLI maps each top-level category to its own exit code, so new errors
should subclass one of the categories below rather than ``CamtrajError``
directly.
"""


class CamtrajError(Exception):
    """Base class for all errors raised by camtraj."""

    exit_code = 1


class InvalidInputError(CamtrajError, ValueError):
    exit_code = 2


class ShapeError(InvalidInputError):
    pass


class LengthError(InvalidInputError):
    pass


class MissingGravityError(InvalidInputError):
    pass


class ConfigError(CamtrajError):
    """Run configuration failed schema validation.

    ``paths`` lists every offending dotted key path.
    """

    exit_code = 3

    def __init__(self, paths, message=None):
        self.paths = list(paths)
        super().__init__(message or "invalid config: " + "; ".join(self.paths))


class DataError(CamtrajError):
    exit_code = 4


class ManifestError(DataError):
    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class MissingEmbeddingError(DataError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TrajectoryFormatError(DataError):
    pass


class InputNotFoundError(DataError, FileNotFoundError):
    def __str__(self):
        return Exception.__str__(self)


class EmbeddingServiceError(CamtrajError):
    exit_code = 5


class EmbeddingHTTPError(EmbeddingServiceError):
    def __init__(self, status, message=""):
        self.status = status
        super().__init__(f"embedding service returned HTTP {status} {message}".strip())


class EmbeddingTimeoutError(EmbeddingServiceError):
    pass


class EmbeddingDimensionError(EmbeddingServiceError):
    pass


class CheckpointError(CamtrajError):
    exit_code = 6


class CheckpointFormatError(CheckpointError):
    """Bad magic, unsupported version or truncated file."""


class CheckpointVersionError(CheckpointFormatError):
    pass


class CheckpointIntegrityError(CheckpointError):
    """Manifest and payload disagree."""


class TrainingError(CamtrajError):
    exit_code = 7


class NonFiniteLossError(TrainingError):
    def __init__(self, step, batch_id, dump_path=None):
        self.step = step
        self.batch_id = batch_id
        self.dump_path = dump_path
        msg = f"non-finite loss at step {step} (batch {batch_id})"
        if dump_path:
            msg += f"; batch dumped to {dump_path}"
        super().__init__(msg)
