"""Exception types shared across the pipeline, mapped to CLI exit codes."""


class PipelineError(Exception):
    """Base class for errors that abort a pipeline run."""

    exit_code = 1


class InputError(PipelineError):
    """Unreadable, malformed, or empty input artifact."""

    exit_code = 2


class DatasetError(PipelineError):
    """Dataset violates a contract (missing class, impossible split)."""

    exit_code = 3


class NumericalError(PipelineError):
    """Non-finite values where finite arithmetic was required."""

    exit_code = 4


class ArtifactMismatchError(PipelineError):
    """Model, feature, or config artifacts that do not belong together."""

    exit_code = 5
