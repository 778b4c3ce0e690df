"""Exception types shared across the package."""


class LcquadError(Exception):
    """Base class for all package errors."""


class DomainError(LcquadError):
    """A reference-triangle coordinate lies outside the simplex."""


class SingularityError(LcquadError):
    """Kernel evaluated at coincident source and target."""


class GeometryError(LcquadError):
    """Degenerate chart or invalid surface data."""


class QuadratureError(LcquadError):
    """A quadrature loop failed to converge within its caps."""


class TableParseError(LcquadError):
    """Malformed quadrature/interpolation table file."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class TableValidationError(LcquadError):
    """A loaded table failed its exactness or consistency checks."""


class UnsupportedFeatureError(LcquadError):
    """Requested an optional capability the object does not provide."""


class AcceleratorError(LcquadError):
    """A far-field accelerator could not meet its accuracy contract."""


class CacheMismatchError(LcquadError):
    """A stored quadrature cache does not match the given mesh or settings."""
