"""
Exception hierarchy. Each error also subclasses the builtin callers would expect.
"""

from __future__ import annotations

from typing import Iterable


class FirespreadError(Exception):
    """Base class for all firespread errors."""


class ConfigError(FirespreadError, ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ConfigError):
    """Spatial or channel dimensions incompatible with the model."""


class SchemaMismatchError(FirespreadError, ValueError):
    """Raster band layout does not match the channel schema."""


class DateFormatError(FirespreadError, ValueError):
    """A raster filename does not encode a parsable date."""


class DuplicateDateError(FirespreadError, ValueError):
    """Two rasters of one event map to the same date."""


class EmptyEventError(FirespreadError, ValueError):
    """An event directory holds no readable daily raster."""


class FeatureLookupError(FirespreadError, KeyError):
    """A requested channel name is not in the schema."""


class ProtocolError(FirespreadError, ValueError):
    """A cross-validation protocol cannot be built from the inputs."""


class CheckpointError(FirespreadError, RuntimeError):
    """A checkpoint cannot be loaded into the target model."""

    def __init__(self, message: str, names: Iterable[str] = ()):
        self.names = list(names)
        if self.names:
            message = f"{message}: {', '.join(self.names)}"
        super().__init__(message)


class TrainingDivergedError(FirespreadError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, parameter_norm: float, loss: float):
        self.step = step
        self.parameter_norm = parameter_norm
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss} at step {step} (parameter norm {parameter_norm:.4g})"
        )

    def __reduce__(self):
        return (type(self), (self.step, self.parameter_norm, self.loss))

    def diagnostic(self) -> dict:
        return {"step": self.step, "parameter_norm": self.parameter_norm, "loss": str(self.loss)}


class DatasetDiffError(FirespreadError, ValueError):
    """Two dataset roots cannot be compared."""


class AnalysisError(FirespreadError, ValueError):
    """An analysis precondition is not met."""


VALIDATION_ERRORS = (
    ConfigError,
    SchemaMismatchError,
    DateFormatError,
    DuplicateDateError,
    EmptyEventError,
    FeatureLookupError,
    ProtocolError,
)
