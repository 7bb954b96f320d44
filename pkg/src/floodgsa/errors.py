"""Exception types shared across the toolkit."""


class FloodGsaError(Exception):
    """Base class for all domain errors raised by this package."""


class ValidationError(FloodGsaError):
    """Invalid configuration or argument values."""


class RasterParseError(FloodGsaError):
    """Malformed ASCII grid file; carries the offending line number."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.path = str(path)
        self.line = line


class UnsupportedResolutionError(FloodGsaError):
    """Requested cell size is not an integer multiple of the source cell size."""


class OutOfExtentError(FloodGsaError):
    """Point(s) fall outside a raster extent; carries the offending labels."""

    def __init__(self, labels):
        self.labels = list(labels)
        super().__init__(f"points outside raster extent: {', '.join(self.labels)}")


class NumericalInstabilityError(FloodGsaError):
    """Non-finite value produced by the flow solver; carries cell index and time."""

    def __init__(self, cell, t):
        self.cell = cell
        self.t = t
        super().__init__(f"non-finite flow value at cell {cell} (t={t:.6g} s)")


class EmptyStoreError(FloodGsaError):
    """Operation requires at least one completed simulation case."""


class DegenerateOutputError(FloodGsaError):
    """Sensitivity indices are undefined because the output has zero variance."""
