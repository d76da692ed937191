"""
Exception hierarchy for the unlearning package.

All errors derive from ValueError so callers that already guard numeric code
with ``except ValueError`` keep working.
"""

from typing import Optional


class UnlearningError(ValueError):
    """Base class for every failure raised by the unlearning package."""


class ShapeError(UnlearningError):
    """Dimension mismatch between vectors, matrices or registries."""


class ParameterError(UnlearningError):
    """Invalid scalar parameter (temperature, k, step size, ...)."""


class OptimizerError(UnlearningError):
    """Adam received a gradient it cannot apply."""

    def __init__(self, message: str, parameter: str = "", index: Optional[tuple] = None):
        super().__init__(message)
        self.parameter = parameter
        self.index = index


class GradientCheckError(UnlearningError):
    """Finite-difference step produced a non-finite loss."""


class ConfigError(UnlearningError):
    """Configuration document is missing, malformed or violates a constraint."""


class DataError(UnlearningError):
    """Input data is empty, malformed or inconsistent."""


class RegistryError(UnlearningError):
    """Concept/modulator/router structures are out of sync with the task stream."""


class LabelError(UnlearningError):
    """A class or category label is not indexed by the model."""


class DecodeError(UnlearningError):
    """The mock language head received a non-finite feature."""


class MetricError(UnlearningError):
    """A metric is undefined for the supplied responses."""


class TrainingError(UnlearningError):
    """A training stage produced a non-finite loss."""

    def __init__(self, message: str, task_index: Optional[int] = None,
                 stage: Optional[int] = None, step: Optional[int] = None):
        super().__init__(message)
        self.task_index = task_index
        self.stage = stage
        self.step = step

    def with_task(self, task_index: int) -> "TrainingError":
        self.task_index = task_index
        return self
