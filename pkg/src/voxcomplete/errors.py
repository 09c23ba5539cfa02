"""Exception types shared across the toolkit."""


class VoxCompleteError(Exception):
    """Base class for all toolkit errors."""


class SpecMismatch(VoxCompleteError):
    """Two grids with different lattice specs were combined."""


class SamplingExhausted(VoxCompleteError):
    """No valid dissection cuboid found within the attempt budget."""


class ParseError(VoxCompleteError):
    """Malformed mesh or grid file.

    Carries ``location`` (byte offset or line number) when known.
    """

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{message} (at {location})"
        super().__init__(message)
        self.location = location


class UnsupportedFormat(VoxCompleteError):
    """File extension or magic not recognized."""


class NonWatertight(VoxCompleteError):
    """Mesh parity votes disagree on too many voxels to trust the fill."""


class DoesNotFit(VoxCompleteError):
    """Grid content larger than the requested cube."""


class DegenerateShape(VoxCompleteError):
    """Generated shape is too small or disconnected."""


class EmptyTarget(VoxCompleteError):
    """Dissection target has no voxels, so no weight field center exists."""


class NonPositiveSigma(VoxCompleteError):
    """Posterior standard deviation must be strictly positive."""


class EmptyGrid(VoxCompleteError):
    """Surface extraction needs at least one set voxel."""


class EmptySurface(VoxCompleteError):
    """Surface distance needs two nonempty point sets."""


class ConfigMismatch(VoxCompleteError):
    """Model configuration inconsistent with the requested operation."""


class ModeArgumentMismatch(VoxCompleteError):
    """Forward-pass arguments do not match the model mode."""


class NonFiniteLoss(VoxCompleteError):
    """Training loss became NaN or infinite."""

    def __init__(self, message, batch_seed=None):
        super().__init__(message)
        self.batch_seed = batch_seed
