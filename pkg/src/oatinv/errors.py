"""Exception types raised across the package."""


class OatError(Exception):
    """Base class for all package errors."""


class InvalidArgument(OatError, ValueError):
    pass


class InvalidGeometry(OatError, ValueError):
    """A sensor lies inside the imaging region, or a distance is zero."""


class InvalidState(OatError, RuntimeError):
    pass


class TrainingDiverged(OatError, FloatingPointError):
    pass


class UndefinedMetric(OatError, ValueError):
    pass


class UnsupportedImage(OatError, ValueError):
    pass
