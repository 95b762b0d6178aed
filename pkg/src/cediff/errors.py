"""Exception types raised across the package."""


class CEDiffError(Exception):
    """Base class for all package errors."""


class DomainError(CEDiffError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(CEDiffError, ValueError):
    """Array shapes do not agree."""


class ConfigError(CEDiffError, ValueError):
    """Invalid configuration. ``problems`` lists every violation found."""

    def __init__(self, message, problems=None):
        self.problems = list(problems or [])
        if self.problems:
            message = message + ":\n  - " + "\n  - ".join(self.problems)
        super().__init__(message)


class RangeError(CEDiffError, ArithmeticError):
    """Evaluation requested outside the numerically safe envelope."""


class NumericError(CEDiffError, ArithmeticError):
    """Non-finite value encountered."""


class SamplingError(NumericError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message)


class TrainingError(NumericError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        super().__init__(message)


class FormatError(CEDiffError, ValueError):
    """Malformed binary or text file. ``offset`` is the byte offset, if known."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class UndefinedMetricError(CEDiffError, ValueError):
    """A metric is undefined for the given inputs."""


class StageError(CEDiffError, RuntimeError):
    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


class MissingArtifactError(CEDiffError, FileNotFoundError):
    """Required input files are absent. ``missing`` lists each one."""

    def __init__(self, message, missing=()):
        self.missing = list(missing)
        if self.missing:
            message = message + ":\n  - " + "\n  - ".join(self.missing)
        super().__init__(message)
