"""Exception hierarchy shared by all modules."""


class MagnusOdomError(Exception):
    """Base class for package errors."""


class LogBranchError(MagnusOdomError, ValueError):
    """Rotation angle too close to pi for a unique logarithm."""


class StructureError(MagnusOdomError, ValueError):
    """A 6x6 matrix does not have the se(3) adjoint block structure."""


class NonPSDError(MagnusOdomError, ValueError):
    """A covariance that must be positive semi-definite is not."""


class DegeneratePointError(MagnusOdomError, ValueError):
    """A point lies at (or numerically at) the sensor origin."""


class BehindSensorError(DegeneratePointError):
    """A map point transforms onto the sensor origin."""


class GimbalError(MagnusOdomError, ValueError):
    """Elevation within numerical distance of +-pi/2."""


class SingularCovarianceError(MagnusOdomError, ValueError):
    """Innovation covariance is singular or badly conditioned."""


class SingularSystemError(MagnusOdomError, ValueError):
    """The Gauss-Newton normal equations are rank deficient."""


class DivergenceError(MagnusOdomError, RuntimeError):
    """Gauss-Newton cost kept increasing after all step halvings."""


class TooShortError(MagnusOdomError, ValueError):
    """Trajectory shorter than the smallest evaluation segment."""


class DataFormatError(MagnusOdomError, ValueError):
    """Malformed input file content."""
