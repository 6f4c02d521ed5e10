"""Exception types shared across the package."""


class RenormLabError(Exception):
    """Base class for all package errors."""


class ShapeError(RenormLabError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(RenormLabError):
    """An operation was called outside its declared contract."""


class NumericError(RenormLabError):
    """Non-finite values where finite ones are required."""


class DegenerateWeightError(RenormLabError):
    """Combined adapter weight has zero norm (collapsed adapter)."""


class DegenerateSupervisionError(RenormLabError):
    """Supervision target carries no usable signal (empty mask, zero variance)."""


class DegenerateGeometryError(RenormLabError):
    """Geometric configuration admits no well-defined answer."""


class BehindCameraError(RenormLabError):
    """Point has non-positive depth in the camera frame."""


class GeometryUnsuitableError(RenormLabError):
    """Monte-Carlo rejection rate too high for meaningful statistics."""


class ConfigError(RenormLabError):
    """Invalid or inconsistent configuration."""


class DivergenceError(RenormLabError):
    """Training produced non-finite losses."""
