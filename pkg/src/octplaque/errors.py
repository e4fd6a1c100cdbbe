"""Exception hierarchy shared across the package."""


class OctPlaqueError(Exception):
    """Base class for all package errors."""


class ShapeError(OctPlaqueError):
    """Tensor/array dimensions do not match an operation's contract."""


class NumericError(OctPlaqueError):
    """Non-finite values where finite ones are required."""


class DegenerateBatchError(OctPlaqueError):
    """Batch statistics requested with fewer than two elements per channel."""


class DegenerateHistogramError(OctPlaqueError):
    """Thresholding asked of an image with a single gray level."""


class NoTissueError(OctPlaqueError):
    """No column of the image contains a suprathreshold pixel."""


class MissingClassError(OctPlaqueError):
    """A class weight was requested for a class with zero training samples."""


class UnusableImageError(OctPlaqueError):
    """Image too small to contain a fully interior patch."""


class EmptyMaskError(OctPlaqueError):
    """Segmentation requested over an empty pixel mask."""


class TrainingDivergenceError(OctPlaqueError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message: str, iteration: int | None = None):
        super().__init__(message)
        self.iteration = iteration


class PhantomSpecError(OctPlaqueError):
    """Synthetic phantom specification is infeasible or inconsistent."""


class CheckpointError(OctPlaqueError):
    """Base class for checkpoint load/save failures."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint file is truncated or structurally invalid."""


class VersionMismatchError(CheckpointError):
    """Checkpoint format version is not supported."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was written for a different architecture."""


class ConfigError(OctPlaqueError):
    """Invalid configuration value or file."""
