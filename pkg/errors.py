"""
Exception hierarchy for the grading toolkit.

Two branches decide how the command line reports a failure:
ValidationError subclasses mean the caller passed something unusable
(exit code 2), QGradeRuntimeError subclasses mean the work itself failed
(exit code 1).
"""


class QGradeError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(QGradeError, ValueError):
    """Bad input, shape, flag or configuration value."""


class QGradeRuntimeError(QGradeError, RuntimeError):
    """Failure while doing otherwise valid work (I/O, corrupt files)."""


# ==============================================================================
# TENSOR / AUTODIFF
# ==============================================================================

class ShapeMismatch(ValidationError):
    pass


class InvalidShape(ValidationError):
    pass


class NonFiniteInput(ValidationError):
    pass


class NotScalar(ValidationError):
    pass


class DetachedGraph(ValidationError):
    pass


class InvalidStepSize(ValidationError):
    pass


# ==============================================================================
# QUANTIZATION / LORA / MODEL
# ==============================================================================

class InvalidBlockSize(ValidationError):
    pass


class InvalidRank(ValidationError):
    pass


class InvalidAlpha(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass


class TokenOutOfRange(ValidationError):
    pass


class SequenceTooLong(ValidationError):
    pass


class WrongHead(ValidationError):
    pass


class TargetOutOfRange(ValidationError):
    pass


# ==============================================================================
# TRAINING / METRICS
# ==============================================================================

class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class StateMismatch(ValidationError):
    pass


class EmptyDataset(ValidationError):
    pass


class IncompatibleObjective(ValidationError):
    pass


# ==============================================================================
# DATA / PIPELINE / CHECKPOINTS
# ==============================================================================

class ParseError(ValidationError):
    """Malformed dataset record. Carries the 1-based line number."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class DuplicateId(ValidationError):
    pass


class ScoreOutOfRange(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class InvalidGrade(ValidationError):
    pass


class IncompatibleCheckpoint(ValidationError):
    pass


class CheckpointFormatError(QGradeRuntimeError):
    pass
