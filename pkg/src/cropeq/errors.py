"""Exception types shared across the package.

Every failure mode that callers may want to handle separately gets its own
class.  The CLI maps these onto process exit codes (see cli.py).
"""

__all__ = [
    "CropEqError",
    "DimensionError",
    "SemanticsError",
    "ConstraintError",
    "EmptySampleError",
    "DegenerateCoverageError",
    "GroupClosureError",
    "EmptyMaskError",
    "OverlapError",
    "ShapeError",
    "TapeError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "ArchitectureMismatchError",
    "DatasetCollisionError",
    "MapFormatError",
    "ConfigError",
    "DivergenceError",
]


class CropEqError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(CropEqError):
    """Array shapes or transform frames do not line up."""


class SemanticsError(CropEqError):
    """An operation was given a map whose semantics tag it cannot handle."""


class ConstraintError(CropEqError):
    """Transform sampling could not satisfy the configured bounds."""


class EmptySampleError(CropEqError):
    """An averaging or loss operation received zero crops."""


class DegenerateCoverageError(CropEqError):
    """No source pixel received any splat weight."""


class GroupClosureError(CropEqError):
    """A transform set handed to the exact averaging oracle is not a group."""


class EmptyMaskError(CropEqError):
    """A metric was asked to reduce over an empty validity mask."""


class OverlapError(CropEqError):
    """Two registered predictions share no valid pixels."""


class ShapeError(CropEqError):
    """Network input does not meet the divisibility contract."""


class TapeError(CropEqError):
    """Backward pass was invoked with a tape from stale parameters."""


class CheckpointFormatError(CropEqError):
    """Checkpoint bytes are malformed (magic, truncation, or checksum)."""


class CheckpointVersionError(CropEqError):
    """Checkpoint format version is not supported."""


class ArchitectureMismatchError(CropEqError):
    """Checkpoint architecture does not match the expected configuration."""


class DatasetCollisionError(CropEqError):
    """Dataset root already contains files and overwrite was not requested."""


class MapFormatError(CropEqError):
    """Dense-map file bytes are malformed (magic, truncation, or checksum)."""


class ConfigError(CropEqError):
    """Training configuration is malformed or semantically invalid."""


class DivergenceError(CropEqError):
    """Training produced a non-finite loss or gradient."""
