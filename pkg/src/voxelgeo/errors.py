"""Exception hierarchy shared across the package."""


class VoxelGeoError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxelGeoError, ValueError):
    pass


class StateError(VoxelGeoError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DegenerateStatisticsError(VoxelGeoError, ValueError):
    pass


class NumericError(VoxelGeoError, FloatingPointError):
    """NaN or Inf detected in a tensor."""


class KindError(VoxelGeoError, ValueError):
    pass


class ConfigError(VoxelGeoError, ValueError):
    pass


class ValidationError(VoxelGeoError, ValueError):
    """Input file or flag failed validation.

    ``path`` and ``field`` name the offending file and entry when known.
    """

    def __init__(self, message, path=None, field=None):
        parts = [message]
        if path is not None:
            parts.append(f"file={path}")
        if field is not None:
            parts.append(f"field={field}")
        super().__init__(" ".join(parts) if len(parts) > 1 else message)
        self.path = path
        self.field = field


class MissingFileError(ValidationError):
    pass


class MalformedMatrixError(ValidationError):
    pass


class NonRigidPoseError(ValidationError):
    pass


class SizeMismatchError(ValidationError):
    pass


class InvalidGridError(ValidationError):
    pass


class PlacementError(VoxelGeoError, RuntimeError):
    """Synthetic scene placement could not be satisfied."""
