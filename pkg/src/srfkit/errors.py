"""Exception types shared across the toolkit."""


class SrfError(Exception):
    """Base class for all srfkit errors."""


class ConfigurationError(SrfError):
    """Invalid configuration value (bad resolution, color width, range...)."""


class BoundsError(SrfError):
    """Coordinate outside the voxel grid."""


class DuplicateVoxelError(SrfError):
    """Attempt to insert a voxel at an already-occupied coordinate."""


class CapacityError(SrfError):
    """Operation refused because it would exceed a memory guard."""


class FormatError(SrfError):
    """Malformed binary file. Carries the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ContractError(SrfError):
    """Caller violated an API precondition."""


class DegenerateFitError(SrfError):
    """Optimization cannot continue (no voxels left, NaN loss...)."""
