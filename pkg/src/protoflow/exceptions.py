"""Exception hierarchy shared by all protoflow modules."""


class ProtoflowError(Exception):
    """Base class for every error raised by protoflow."""


class ShapeError(ProtoflowError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(ProtoflowError, ValueError):
    """An input lies outside the domain of an operation (log of 0, zero norm, ...)."""


class NonFiniteError(ProtoflowError, ValueError):
    """NaN or Inf found where finite values are required."""


class FormatError(ProtoflowError, ValueError):
    """A binary or text file does not follow the expected layout."""


class SamplingError(ProtoflowError, ValueError):
    """Not enough classes or samples to build the requested episode."""


class ConfigError(ProtoflowError, ValueError):
    """Invalid or inconsistent configuration."""


class IntegrationError(ProtoflowError, RuntimeError):
    """The ODE state became non-finite during integration."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NonDeterminismError(ProtoflowError, RuntimeError):
    """Two evaluations of the same function at the same point disagreed."""


class TrainingDiverged(ProtoflowError, RuntimeError):
    """Meta-training produced a non-finite loss.

    ``checkpoint`` holds the last model whose loss was finite.
    """

    def __init__(self, message, checkpoint=None, epoch=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class ArtifactMismatch(ProtoflowError, ValueError):
    """A checkpoint is incompatible with the dataset it is applied to."""


class TruncatedFileError(FormatError, OSError):
    """A binary file ended before all declared records were read."""
