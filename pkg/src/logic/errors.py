"""
Exception hierarchy for the CAF desk library.
Every failure raised by the logic layer derives from CafError so the CLI can
map it onto an exit code.
"""

from typing import Optional


class CafError(Exception):
    """Base class for all library errors."""


class ShapeError(CafError, ValueError):
    """Array shapes do not line up with a model or with each other."""


class OptimizerError(CafError):
    """An optimizer step was rejected (non-finite gradients)."""


class CheckpointError(CafError):
    """A checkpoint payload is corrupt, truncated or of an unknown version."""


class DistributionError(CafError, ValueError):
    """A distribution spec has invalid parameters."""


class CouplingFormatError(CafError):
    """A coupling file is corrupt or inconsistent with its header."""


class TrainingError(CafError):
    """Training produced a non-finite or diverging loss."""


class SamplingError(CafError):
    """A sampler produced a non-finite state."""

    def __init__(self, message: str, step_index: Optional[int] = None):
        super().__init__(message)
        self.step_index = step_index


class MetricError(CafError):
    """A metric could not be computed on the given inputs."""


class ConfigError(CafError, ValueError):
    """An experiment config file is invalid."""


class PhaseError(CafError):
    """A pipeline phase failed."""

    def __init__(self, phase: str, artifact_path: str, cause: Exception):
        super().__init__(f"phase '{phase}' failed ({artifact_path}): {cause}")
        self.phase = phase
        self.artifact_path = artifact_path
        self.cause = cause
