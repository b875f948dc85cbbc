"""Exception types shared across the package."""


class LumisplatError(Exception):
    """Base class for all package-specific errors."""


class AngleNearPi(LumisplatError):
    """Rotation angle too close to pi for a well-conditioned logarithm."""


class RayParallelToPlane(LumisplatError):
    """Ray direction is (numerically) parallel to the target plane."""


class IntersectionBehindCamera(LumisplatError):
    """Ray-plane intersection parameter is non-positive."""


class DegenerateFalloff(LumisplatError):
    """Falloff denominator tau + d^2 is below the safe threshold."""


class ZeroDirection(LumisplatError):
    """A direction vector with (numerically) zero length was supplied."""


class LayoutMismatch(LumisplatError):
    """Parameter vector does not match the expected layout."""


class ShapeMismatch(LumisplatError):
    """Array shapes disagree where they must match."""


class NonFiniteLoss(LumisplatError):
    """Loss or gradient evaluated to NaN or Inf."""


class EmptyROI(LumisplatError):
    """No valid pixel available for a loss evaluation."""


class FitFailed(LumisplatError):
    """A regression pre-fit did not reach the required residual."""


class BehindCamera(LumisplatError):
    """Point projects behind the camera near plane."""


class SchemaError(LumisplatError):
    """A manifest, config, or request document violates its schema."""
