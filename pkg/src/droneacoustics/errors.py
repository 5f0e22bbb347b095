"""Exception types raised across the package."""


class DroneAcousticsError(Exception):
    """Base class for all package errors."""


class ConfigError(DroneAcousticsError, ValueError):
    pass


class SourceOutsideRoom(DroneAcousticsError, ValueError):
    pass


class LengthTooShort(DroneAcousticsError, ValueError):
    pass


class SampleRateMismatch(DroneAcousticsError, ValueError):
    pass


class DegeneratePosition(DroneAcousticsError, ValueError):
    pass


class IndexOutOfRange(DroneAcousticsError, IndexError):
    pass


class ShapeMismatch(DroneAcousticsError, ValueError):
    pass


class EmptyDataset(DroneAcousticsError, ValueError):
    pass


class LengthMismatch(DroneAcousticsError, ValueError):
    pass


class EmptyBasis(DroneAcousticsError, ValueError):
    pass


class TargetOutsideRoom(DroneAcousticsError, ValueError):
    pass


class PeriodMismatch(DroneAcousticsError, ValueError):
    pass


class EmptyGrid(DroneAcousticsError, ValueError):
    pass
